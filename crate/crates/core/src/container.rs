//! Self-describing tensor container shared by checkpoints and residual
//! dumps.
//!
//! Layout: a UTF-8 manifest terminated by the line `end_manifest`, then the
//! concatenated little-endian tensor payloads.
//!
//! ```text
//! MADT-CONTAINER
//! format_version=1
//! kind=checkpoint
//! meta <key>=<value>
//! tensor <name> <dtype> <rows> <cols> <offset>
//! end_manifest
//! <payload>
//! ```
//!
//! Offsets are in bytes from the first payload byte. Names and keys may not
//! contain whitespace; values run to the end of the line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::{DType, Real, Tensor2};

pub const MAGIC: &str = "MADT-CONTAINER";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains(char::is_whitespace) && !value.contains('\n'));
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| bad(format!("missing manifest key {key}")))
    }

    pub fn parse_meta<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("manifest key {key} has unparsable value {raw:?}")))
    }

    pub fn push_tensor<T: Real>(&mut self, name: &str, t: &Tensor2<T>) {
        debug_assert!(!name.contains(char::is_whitespace));
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.tensors.push(Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            rows: t.rows(),
            cols: t.cols(),
            bytes,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    /// Decodes a tensor, converting element type if it differs from `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor2<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        e.decode()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("format_version={FORMAT_VERSION}\n"));
        head.push_str(&format!("kind={}\n", self.kind));
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.tensors {
            head.push_str(&format!(
                "tensor {} {} {} {} {}\n",
                e.name,
                e.dtype.name(),
                e.rows,
                e.cols,
                offset
            ));
            offset += e.bytes.len();
        }
        head.push_str("end_manifest\n");
        let mut out = head.into_bytes();
        for e in &self.tensors {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const END: &[u8] = b"end_manifest\n";
        let end = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| bad("manifest terminator not found"))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[end + END.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a container file"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version="))
            .ok_or_else(|| bad("missing format_version"))?;
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind="))
            .ok_or_else(|| bad("missing kind"))?;
        let mut c = Container::new(kind);
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed meta line {line:?}")))?;
                c.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                }
                let dtype = DType::parse(f[1]).ok_or_else(|| bad(format!("unknown dtype {}", f[1])))?;
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
                let (rows, cols, offset) = (num(f[2])?, num(f[3])?, num(f[4])?);
                let len = rows * cols * dtype.size();
                let slice = payload
                    .get(offset..offset + len)
                    .ok_or_else(|| bad(format!("tensor {} exceeds payload", f[0])))?;
                c.tensors.push(Entry {
                    name: f[0].to_string(),
                    dtype,
                    rows,
                    cols,
                    bytes: slice.to_vec(),
                });
            } else if !line.is_empty() {
                return Err(bad(format!("unexpected manifest line {line:?}")));
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Entry {
    pub fn decode<T: Real>(&self) -> Result<Tensor2<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
        };
        Tensor2::from_vec(self.rows, self.cols, data)
    }
}
