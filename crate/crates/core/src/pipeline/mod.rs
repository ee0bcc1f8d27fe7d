//! Data handling, training and detection runs, reports and the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod report;
pub mod synth;
pub mod train;

use crate::diagnosis::{window_scores, ThresholdRule, Thresholds};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelState};
use crate::ndgrad::{Real, Tensor2};
use crate::statemat::default_taus;

use config::{rule_from, TrainConfig};
use data::{make_windows, Normalizer, Series};
use train::{prepare, train, EpochLog, Prepared, TrainLog};

/// Validation score streams used to calibrate thresholds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreStreams {
    pub point: Vec<f64>,
    pub sensor: Vec<f64>,
    pub temporal: Vec<f64>,
}

pub fn score_streams<T: Real>(state: &ModelState<T>, windows: &[Prepared<T>]) -> Result<ScoreStreams> {
    let mut s = ScoreStreams::default();
    for w in windows {
        let out = state.forward(&w.window, &w.pair)?;
        let ws = window_scores(&w.window, &w.pair, &out)?;
        s.point.extend(ws.point);
        s.sensor.extend(ws.sensor);
        s.temporal.extend(ws.temporal);
    }
    Ok(s)
}

pub fn calibrate_streams(s: &ScoreStreams, rule: ThresholdRule) -> Result<Thresholds> {
    Thresholds::calibrate(rule, &s.point, None, &s.sensor, &s.temporal)
}

pub struct Fitted<T: Real> {
    pub checkpoint: Checkpoint<T>,
    pub log: TrainLog,
    pub thresholds: Thresholds,
}

/// Trains on the presumed-normal rows of `series`: drops labeled rows, holds
/// out the tail for validation, z-scores with training statistics, trains,
/// and calibrates thresholds on the validation scores.
pub fn fit<T: Real>(series: &Series, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<Fitted<T>> {
    cfg.validate()?;
    let (clean, dropped) = series.drop_labeled();
    if dropped > 0 {
        log::warn!("dropped {dropped} labeled-anomalous training rows");
    }
    let (train_part, valid_part) = clean.split_tail(cfg.valid_fraction)?;
    let model_cfg = cfg.model_for(series.sensors.len())?;
    let w = model_cfg.w;
    let norm = Normalizer::fit(&train_part.values)?;
    let (def_t, def_s) = default_taus(w, model_cfg.n);
    let (tau_t, tau_s) = (cfg.tau_t.unwrap_or(def_t), cfg.tau_s.unwrap_or(def_s));
    let train_set = prepare(make_windows::<T>(&norm.apply(&train_part.values)?, w)?, tau_t, tau_s)?;
    let valid_set = if valid_part.len() >= w {
        prepare(make_windows::<T>(&norm.apply(&valid_part.values)?, w)?, tau_t, tau_s)?
    } else {
        log::warn!("validation split shorter than one window; calibrating on training windows");
        Vec::new()
    };
    let state = ModelState::<T>::init(model_cfg, cfg.seed)?;
    let outcome = train(state, None, &train_set, &valid_set, cfg, on_epoch)?;
    let calib_set = if valid_set.is_empty() { &train_set } else { &valid_set };
    let streams = score_streams(&outcome.state, calib_set)?;
    let thresholds = calibrate_streams(&streams, cfg.rule)?;
    let row = |v: &[f64]| Tensor2::from_vec(1, v.len(), v.to_vec());
    let mut extra_meta = vec![
        ("lambda".to_string(), cfg.lambda.to_string()),
        ("merge_gap".to_string(), cfg.merge_gap.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("best_epoch".to_string(), outcome.log.best_epoch.to_string()),
    ];
    extra_meta.extend(threshold_meta(&thresholds));
    let checkpoint = Checkpoint {
        state: outcome.state,
        adam: Some(outcome.adam),
        sensors: series.sensors.clone(),
        norm_mean: norm.mean,
        norm_std: norm.std,
        tau_t,
        tau_s,
        extra_meta,
        extra_tensors: vec![
            ("valid_point".to_string(), row(&streams.point)?),
            ("valid_sensor".to_string(), row(&streams.sensor)?),
            ("valid_temporal".to_string(), row(&streams.temporal)?),
        ],
    };
    Ok(Fitted {
        checkpoint,
        log: outcome.log,
        thresholds,
    })
}

pub fn threshold_meta(th: &Thresholds) -> Vec<(String, String)> {
    let (r, beta) = match th.rule {
        ThresholdRule::Ratio { r } => (r, 1.0),
        ThresholdRule::BetaMax { beta } => (0.01, beta),
    };
    vec![
        ("threshold_rule".into(), th.rule.name().into()),
        ("r".into(), r.to_string()),
        ("beta".into(), beta.to_string()),
        ("delta_point".into(), th.delta_point.to_string()),
        ("delta_sensor".into(), th.delta_sensor.to_string()),
        ("delta_temporal".into(), th.delta_temporal.to_string()),
    ]
}

/// Thresholds stored in a checkpoint, or recalibrated from its stored
/// validation streams when `rule` is given.
pub fn checkpoint_thresholds<T: Real>(ck: &Checkpoint<T>, rule: Option<ThresholdRule>) -> Result<Thresholds> {
    let missing = |k: &str| Error::Checkpoint(format!("checkpoint has no {k}"));
    let num = |k: &str| -> Result<f64> {
        ck.meta(k)
            .ok_or_else(|| missing(k))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
    };
    match rule {
        Some(rule) => {
            let stream = |k: &str| -> Result<Vec<f64>> {
                Ok(ck.extra_tensor(k).ok_or_else(|| missing(k))?.data().to_vec())
            };
            let s = ScoreStreams {
                point: stream("valid_point")?,
                sensor: stream("valid_sensor")?,
                temporal: stream("valid_temporal")?,
            };
            calibrate_streams(&s, rule)
        }
        None => Ok(Thresholds {
            rule: rule_from(ck.meta("threshold_rule").ok_or_else(|| missing("threshold_rule"))?, num("r")?, num("beta")?)?,
            delta_point: num("delta_point")?,
            delta_sensor: num("delta_sensor")?,
            delta_temporal: num("delta_temporal")?,
        }),
    }
}
