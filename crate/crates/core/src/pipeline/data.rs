//! CSV ingestion, per-sensor z-scoring and non-overlapping windowing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor2};
use crate::statemat::TimeWindow;

pub const LABEL_COLUMN: &str = "label";

/// A multivariate series: one row per timestep, one column per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub sensors: Vec<String>,
    pub values: Tensor2<f64>,
    pub labels: Option<Vec<bool>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Rows `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Series {
        let n = self.values.cols();
        let data = self.values.data()[start * n..end * n].to_vec();
        Series {
            sensors: self.sensors.clone(),
            values: Tensor2::from_vec(end - start, n, data).expect("slice shape"),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// Splits off the trailing `valid_fraction` of rows as a contiguous
    /// validation part.
    pub fn split_tail(&self, valid_fraction: f64) -> Result<(Series, Series)> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config(format!(
                "valid_fraction must lie in [0, 1), got {valid_fraction}"
            )));
        }
        let cut = self.len() - (self.len() as f64 * valid_fraction).round() as usize;
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }

    /// Drops rows labeled anomalous. Returns the kept series and the number of
    /// dropped rows.
    pub fn drop_labeled(&self) -> (Series, usize) {
        let Some(labels) = &self.labels else {
            return (self.clone(), 0);
        };
        let n = self.values.cols();
        let mut data = Vec::with_capacity(self.values.len());
        let mut kept = 0;
        for (t, &l) in labels.iter().enumerate() {
            if !l {
                data.extend_from_slice(self.values.row(t));
                kept += 1;
            }
        }
        let s = Series {
            sensors: self.sensors.clone(),
            values: Tensor2::from_vec(kept, n, data).expect("kept shape"),
            labels: Some(vec![false; kept]),
        };
        (s, labels.len() - kept)
    }
}

fn parse_err(line: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        detail: detail.into(),
    }
}

/// Reads a CSV with a header of sensor names and an optional trailing
/// `label` column. With `require_labels` a missing label column is an error.
pub fn load_csv(path: &Path, require_labels: bool) -> Result<Series> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, require_labels)
}

pub fn read_csv<R: std::io::Read>(reader: R, require_labels: bool) -> Result<Series> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, "empty header row"));
    }
    let has_labels = header.last().map(String::as_str) == Some(LABEL_COLUMN);
    if require_labels && !has_labels {
        return Err(parse_err(1, format!("missing trailing `{LABEL_COLUMN}` column")));
    }
    let sensors: Vec<String> = if has_labels {
        header[..header.len() - 1].to_vec()
    } else {
        header.clone()
    };
    if sensors.is_empty() {
        return Err(parse_err(1, "no sensor columns"));
    }
    let n = sensors.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} cells, found {}", header.len(), rec.len()),
            ));
        }
        for (j, cell) in rec.iter().take(n).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column {:?}: non-numeric cell {cell:?}", sensors[j]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {:?}: non-finite value", sensors[j])));
            }
            data.push(v);
        }
        if has_labels {
            labels.push(match &rec[n] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(line, format!("label must be 0 or 1, got {other:?}"))),
            });
        }
        rows += 1;
    }
    Ok(Series {
        sensors,
        values: Tensor2::from_vec(rows, n, data)?,
        labels: has_labels.then_some(labels),
    })
}

pub fn save_csv(path: &Path, series: &Series) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), series).map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: std::io::Write>(writer: W, series: &Series) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = series.sensors.clone();
    if series.labels.is_some() {
        header.push(LABEL_COLUMN.to_string());
    }
    wtr.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec: Vec<String> = series.values.row(t).iter().map(f64::to_string).collect();
        if let Some(l) = &series.labels {
            rec.push(if l[t] { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()
}

/// Per-sensor mean and standard deviation of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Sensors with (near) zero spread get unit scale.
    pub fn fit(values: &Tensor2<f64>) -> Result<Self> {
        let (rows, n) = values.shape();
        if rows == 0 {
            return Err(Error::Input("cannot fit normalization on an empty series".into()));
        }
        let mut mean = vec![0.0; n];
        for t in 0..rows {
            for (m, v) in mean.iter_mut().zip(values.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; n];
        for t in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(values.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, values: &Tensor2<f64>) -> Result<Tensor2<f64>> {
        let (rows, n) = values.shape();
        if n != self.mean.len() {
            return Err(Error::Config(format!(
                "series has {n} sensors, normalization expects {}",
                self.mean.len()
            )));
        }
        let mut out = values.clone();
        for t in 0..rows {
            for ((v, m), s) in out.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// `floor(T / w)` contiguous non-overlapping windows; the remainder is
/// dropped.
pub fn make_windows<T: Real>(values: &Tensor2<f64>, w: usize) -> Result<Vec<TimeWindow<T>>> {
    let (rows, n) = values.shape();
    if w == 0 || rows < w {
        return Err(Error::Input(format!(
            "series of length {rows} is shorter than window {w}"
        )));
    }
    (0..rows / w)
        .map(|k| {
            let start = k * w;
            let data = values.data()[start * n..(start + w) * n]
                .iter()
                .map(|&v| T::of(v))
                .collect();
            TimeWindow::new(Tensor2::from_vec(w, n, data)?, start)
        })
        .collect()
}
