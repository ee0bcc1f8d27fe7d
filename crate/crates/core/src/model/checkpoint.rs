use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::ndgrad::{AdamConfig, AdamState, Real, Tensor2};

use super::config::ModelConfig;
use super::params::ModelState;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Everything needed to resume training or run detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub state: ModelState<T>,
    pub adam: Option<AdamState<T>>,
    pub sensors: Vec<String>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub tau_t: f64,
    pub tau_s: f64,
    /// Free-form manifest entries (calibrated thresholds, training settings).
    pub extra_meta: Vec<(String, String)>,
    /// Auxiliary tensors (validation score streams).
    pub extra_tensors: Vec<(String, Tensor2<f64>)>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Checkpoint(format!("bad number {x:?} in manifest")))
        })
        .collect()
}

impl<T: Real> Checkpoint<T> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.extra_meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn extra_tensor(&self, name: &str) -> Option<&Tensor2<f64>> {
        self.extra_tensors
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, t)| t)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND);
        let cfg = &self.state.config;
        c.set_meta("dtype", T::DTYPE.name());
        c.set_meta("w", cfg.w);
        c.set_meta("n", cfg.n);
        c.set_meta("d", cfg.d);
        c.set_meta("heads", cfg.heads);
        c.set_meta("layers", cfg.layers);
        c.set_meta("eps_ln", cfg.eps_ln);
        c.set_meta("ff_mult", cfg.ff_mult);
        c.set_meta("temporal", cfg.temporal);
        c.set_meta("spatial", cfg.spatial);
        c.set_meta("tau_t", self.tau_t);
        c.set_meta("tau_s", self.tau_s);
        c.set_meta("sensors", self.sensors.join(","));
        c.set_meta("norm_mean", join(&self.norm_mean));
        c.set_meta("norm_std", join(&self.norm_std));
        c.set_meta("param_count", self.state.params.len());
        for (name, p) in self.state.names.iter().zip(&self.state.params) {
            c.push_tensor(&format!("param.{name}"), p);
        }
        if let Some(adam) = &self.adam {
            c.set_meta("adam_step", adam.step);
            c.set_meta("adam_lr", adam.config.lr);
            c.set_meta("adam_beta1", adam.config.beta1);
            c.set_meta("adam_beta2", adam.config.beta2);
            c.set_meta("adam_eps", adam.config.eps);
            for (name, (m, v)) in self.state.names.iter().zip(adam.m.iter().zip(&adam.v)) {
                c.push_tensor(&format!("adam.m.{name}"), m);
                c.push_tensor(&format!("adam.v.{name}"), v);
            }
        }
        for (k, v) in &self.extra_meta {
            c.set_meta(&format!("extra.{k}"), v);
        }
        for (k, t) in &self.extra_tensors {
            c.push_tensor(&format!("extra.{k}"), t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a checkpoint, found kind {:?}",
                c.kind
            )));
        }
        let config = ModelConfig {
            w: c.parse_meta("w")?,
            n: c.parse_meta("n")?,
            d: c.parse_meta("d")?,
            heads: c.parse_meta("heads")?,
            layers: c.parse_meta("layers")?,
            eps_ln: c.parse_meta("eps_ln")?,
            ff_mult: c.parse_meta("ff_mult")?,
            temporal: c.parse_meta("temporal")?,
            spatial: c.parse_meta("spatial")?,
        };
        let params: Vec<(String, Tensor2<T>)> = c
            .tensors
            .iter()
            .filter_map(|e| e.name.strip_prefix("param.").map(|n| (n.to_string(), e)))
            .map(|(n, e)| e.decode().map(|t| (n, t)))
            .collect::<Result<_>>()?;
        let state = ModelState::from_named(config, params)?;
        let adam = match c.meta("adam_step") {
            None => None,
            Some(_) => {
                let cfg = AdamConfig {
                    lr: c.parse_meta("adam_lr")?,
                    beta1: c.parse_meta("adam_beta1")?,
                    beta2: c.parse_meta("adam_beta2")?,
                    eps: c.parse_meta("adam_eps")?,
                };
                let mut m = Vec::with_capacity(state.names.len());
                let mut v = Vec::with_capacity(state.names.len());
                for name in &state.names {
                    m.push(c.tensor(&format!("adam.m.{name}"))?);
                    v.push(c.tensor(&format!("adam.v.{name}"))?);
                }
                Some(AdamState {
                    config: cfg,
                    step: c.parse_meta("adam_step")?,
                    m,
                    v,
                })
            }
        };
        let sensors_raw = c.require_meta("sensors")?;
        let sensors = if sensors_raw.is_empty() {
            Vec::new()
        } else {
            sensors_raw.split(',').map(str::to_string).collect()
        };
        let extra_meta = c
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let extra_tensors = c
            .tensors
            .iter()
            .filter_map(|e| e.name.strip_prefix("extra.").map(|n| (n.to_string(), e)))
            .map(|(n, e)| e.decode().map(|t| (n, t)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            state,
            adam,
            sensors,
            norm_mean: split_f64(c.require_meta("norm_mean")?)?,
            norm_std: split_f64(c.require_meta("norm_std")?)?,
            tau_t: c.parse_meta("tau_t")?,
            tau_s: c.parse_meta("tau_s")?,
            extra_meta,
            extra_tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
