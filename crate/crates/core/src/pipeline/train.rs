//! Mini-batch Adam training with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{forward_tape, Bound, ModelState};
use crate::ndgrad::{AdamConfig, AdamState, Real, Tape};
use crate::statemat::{StateMatrixPair, TimeWindow};

use super::config::TrainConfig;

/// A window with its state matrices, built once and reused every epoch.
#[derive(Debug, Clone)]
pub struct Prepared<T: Real> {
    pub window: TimeWindow<T>,
    pub pair: StateMatrixPair<T>,
}

pub fn prepare<T: Real>(windows: Vec<TimeWindow<T>>, tau_t: f64, tau_s: f64) -> Result<Vec<Prepared<T>>> {
    windows
        .into_iter()
        .map(|window| {
            let pair = StateMatrixPair::build(&window, tau_t, tau_s)?;
            Ok(Prepared { window, pair })
        })
        .collect()
}

/// Loss of one window. With `grad_scale` the loss is backpropagated with
/// that weight and the gradients are added to `state`.
pub fn window_loss<T: Real>(
    state: &mut ModelState<T>,
    w: &Prepared<T>,
    lambda: f64,
    grad_scale: Option<f64>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, state, grad_scale.is_some());
    let x = tape.constant(w.window.values().detached());
    let tm = tape.constant(w.pair.temporal.detached());
    let sm = tape.constant(w.pair.spatial.detached());
    let attempt = forward_tape(&mut tape, state, &b, x, Some(tm), Some(sm))
        .and_then(|out| total_loss(&mut tape, &out, x, Some(tm), Some(sm), lambda));
    let start = w.window.start_index();
    let non_finite = |tape: &Tape<T>, what: String| {
        let detail = match tape.first_non_finite() {
            Some((idx, op)) => {
                format!("{what} for window at {start}; first non-finite tensor is node {idx} ({op})")
            }
            None => format!("{what} for window at {start}"),
        };
        Error::Numeric { op: "train", detail }
    };
    let loss = match attempt {
        Ok(l) => l,
        Err(Error::Numeric { op, detail }) => {
            return Err(non_finite(&tape, format!("{op} failed: {detail}")))
        }
        Err(e) => return Err(e),
    };
    let total = tape.value(loss.total).item().as_f64();
    if !total.is_finite() {
        return Err(non_finite(&tape, format!("loss is {total}")));
    }
    if let Some(s) = grad_scale {
        let scaled = tape.scale(loss.total, T::of(s));
        tape.backward(scaled)?;
        b.harvest(&mut tape, state);
    }
    Ok(loss.breakdown(&tape))
}

/// Mean total loss over `windows` without touching gradients.
pub fn mean_loss<T: Real>(state: &mut ModelState<T>, windows: &[Prepared<T>], lambda: f64) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Input("no windows to evaluate".into()));
    }
    let mut s = 0.0;
    for w in windows {
        s += window_loss(state, w, lambda, None)?.total;
    }
    Ok(s / windows.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean window loss over the epoch's batches.
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_align: f64,
    pub valid_loss: f64,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
    /// Optimizer step count before the first epoch (non-zero when resuming).
    pub initial_step: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_recon,train_align,valid_loss,adam_step\n");
        s.push_str(&format!("0,{},,,,{}\n", self.initial_loss, self.initial_step));
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_recon, e.train_align, e.valid_loss, e.adam_step
            ));
        }
        s
    }
}

pub struct TrainOutcome<T: Real> {
    /// Parameters of the best validation epoch.
    pub state: ModelState<T>,
    /// Optimizer state matching `state`.
    pub adam: AdamState<T>,
    pub log: TrainLog,
}

/// Trains `state` (resuming `adam` when given). Validation loss drives early
/// stopping; without validation windows the training loss is used.
pub fn train<T: Real>(
    mut state: ModelState<T>,
    adam: Option<AdamState<T>>,
    train_set: &[Prepared<T>],
    valid_set: &[Prepared<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::Input("training needs at least one window".into()));
    }
    cfg.validate()?;
    let mut adam = adam.unwrap_or_else(|| {
        AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &state.params,
        )
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let initial_loss = mean_loss(&mut state, train_set, cfg.lambda)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::INFINITY, 0usize, state.clone(), adam.clone());
    let mut stale = 0;
    let mut log = TrainLog {
        initial_loss,
        initial_step: adam.step,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut recon, mut align) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let b = window_loss(&mut state, &train_set[i], cfg.lambda, Some(scale))?;
                total += b.total;
                recon += b.recon();
                align += b.align();
            }
            adam.step(&mut state.params)?;
        }
        let count = train_set.len() as f64;
        let train_loss = total / count;
        let valid_loss = if valid_set.is_empty() {
            train_loss
        } else {
            mean_loss(&mut state, valid_set, cfg.lambda)?
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            train_recon: recon / count,
            train_align: align / count,
            valid_loss,
            adam_step: adam.step,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if valid_loss < best.0 {
            best = (valid_loss, epoch, state.clone(), adam.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    log.best_epoch = best.1;
    Ok(TrainOutcome {
        state: best.2,
        adam: best.3,
        log,
    })
}
