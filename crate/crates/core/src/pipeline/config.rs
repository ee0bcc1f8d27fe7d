//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat
//! (synthetic injections use this); for scalar keys the last value wins.
//!
//! Training keys:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `profile` | `desk` | `desk` (d=64, h=4, K=2), `paper` (d=512, h=8, K=3) or `fast` (desk shape, lr 1e-3, batch 8, 15 epochs, patience 5) |
//! | `window` | 100 | window length `w` |
//! | `d_model`, `heads`, `layers`, `ff_mult`, `eps_ln` | profile | model shape |
//! | `temporal`, `spatial` | true | branch switches |
//! | `batch` | 64 | windows per Adam step |
//! | `lr` | 1e-4 | Adam learning rate |
//! | `lambda` | 19 | alignment weight |
//! | `max_epochs` | 10 | epoch cap |
//! | `patience` | 3 | epochs without validation improvement before stopping |
//! | `valid_fraction` | 0.2 | tail fraction of the training series held out |
//! | `seed` | 0 | initialization and shuffling seed |
//! | `tau_t`, `tau_s` | n, w | state-matrix temperatures |
//! | `threshold_rule` | `betamax` | `ratio` or `betamax` |
//! | `r` | 0.01 | flagged fraction for `ratio` |
//! | `beta` | 2.0 | multiplier for `betamax` |
//! | `merge_gap` | 5 | flagged runs closer than this many steps form one event |

use std::path::Path;
use std::str::FromStr;

use crate::diagnosis::ThresholdRule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Training, model and threshold settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Model shape; `n` is replaced by the data's sensor count.
    pub model: ModelConfig,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub valid_fraction: f64,
    pub seed: u64,
    pub tau_t: Option<f64>,
    pub tau_s: Option<f64>,
    pub rule: ThresholdRule,
    pub merge_gap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(0),
            batch: 64,
            lr: 1e-4,
            lambda: 19.0,
            max_epochs: 10,
            patience: 3,
            valid_fraction: 0.2,
            seed: 0,
            tau_t: None,
            tau_s: None,
            rule: ThresholdRule::BetaMax { beta: 2.0 },
            merge_gap: 5,
        }
    }
}

impl TrainConfig {
    /// Desk model with a larger step and smaller batches; converges in a few
    /// minutes on one core.
    pub fn fast() -> Self {
        TrainConfig {
            batch: 8,
            lr: 1e-3,
            max_epochs: 15,
            patience: 5,
            ..Default::default()
        }
    }

    /// Applies the keys of `kv` on top of the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        match kv.get("profile") {
            None | Some("desk") => {}
            Some("paper") => cfg.model = ModelConfig::paper(0),
            Some("fast") => cfg = TrainConfig::fast(),
            Some(other) => return Err(Error::Config(format!("unknown profile {other:?}"))),
        }
        let mut rule_name = None;
        let mut r = 0.01;
        let mut beta = 2.0;
        for (key, v) in kv.entries() {
            match key {
                "profile" => {}
                "window" => cfg.model.w = parse(key, v)?,
                "d_model" => cfg.model.d = parse(key, v)?,
                "heads" => cfg.model.heads = parse(key, v)?,
                "layers" => cfg.model.layers = parse(key, v)?,
                "ff_mult" => cfg.model.ff_mult = parse(key, v)?,
                "eps_ln" => cfg.model.eps_ln = parse(key, v)?,
                "temporal" => cfg.model.temporal = parse(key, v)?,
                "spatial" => cfg.model.spatial = parse(key, v)?,
                "batch" => cfg.batch = parse(key, v)?,
                "lr" => cfg.lr = parse(key, v)?,
                "lambda" => cfg.lambda = parse(key, v)?,
                "max_epochs" => cfg.max_epochs = parse(key, v)?,
                "patience" => cfg.patience = parse(key, v)?,
                "valid_fraction" => cfg.valid_fraction = parse(key, v)?,
                "seed" => cfg.seed = parse(key, v)?,
                "tau_t" => cfg.tau_t = Some(parse(key, v)?),
                "tau_s" => cfg.tau_s = Some(parse(key, v)?),
                "threshold_rule" => rule_name = Some(v.to_string()),
                "r" => r = parse(key, v)?,
                "beta" => beta = parse(key, v)?,
                "merge_gap" => cfg.merge_gap = parse(key, v)?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.rule = rule_from(rule_name.as_deref().unwrap_or(cfg.rule.name()), r, beta)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        for tau in [self.tau_t, self.tau_s].into_iter().flatten() {
            if !(tau > 0.0) {
                return Err(Error::Config("tau_t and tau_s must be positive".into()));
            }
        }
        self.rule.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Model shape for `n` sensors.
    pub fn model_for(&self, n: usize) -> Result<ModelConfig> {
        let m = ModelConfig { n, ..self.model };
        m.validate()?;
        Ok(m)
    }
}

pub fn rule_from(name: &str, r: f64, beta: f64) -> Result<ThresholdRule> {
    let rule = match name {
        "ratio" => ThresholdRule::Ratio { r },
        "betamax" => ThresholdRule::BetaMax { beta },
        other => return Err(Error::Config(format!("unknown threshold rule {other:?}"))),
    };
    rule.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(rule)
}
