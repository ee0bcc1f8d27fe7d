use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::total_loss;
use crate::ndgrad::gradcheck::{probe_all, Probe};
use crate::ndgrad::{Tape, Tensor2};
use crate::statemat::{default_taus, StateMatrixPair, TimeWindow};

use super::config::ModelConfig;
use super::forward::{forward_tape, Bound};
use super::params::ModelState;

fn total(state: &ModelState<f64>, win: &TimeWindow<f64>, pair: &StateMatrixPair<f64>, lambda: f64, track: bool) -> Result<(Tape<f64>, Bound, f64)> {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, state, track);
    let x = tape.constant(win.values().clone());
    let tm = tape.constant(pair.temporal.clone());
    let sm = tape.constant(pair.spatial.clone());
    let out = forward_tape(&mut tape, state, &b, x, Some(tm), Some(sm))?;
    let loss = total_loss(&mut tape, &out, x, Some(tm), Some(sm), lambda)?;
    if track {
        tape.backward(loss.total)?;
    }
    let v = tape.value(loss.total).item();
    Ok((tape, b, v))
}

/// Compares the backpropagated gradient of the total loss with central
/// differences on a random window. Every parameter tensor gets at least one
/// probe; the remaining `coords - tensors` probes are drawn uniformly.
pub fn check_total_loss(config: ModelConfig, lambda: f64, seed: u64, coords: usize, h: f64) -> Result<Vec<Probe>> {
    let mut state = ModelState::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let data = (0..config.w * config.n).map(|_| rng.sample(StandardNormal)).collect();
    let win = TimeWindow::new(Tensor2::from_vec(config.w, config.n, data)?, 0)?;
    let (tt, ts) = default_taus(config.w, config.n);
    let pair = StateMatrixPair::build(&win, tt, ts)?;

    let (mut tape, b, _) = total(&state, &win, &pair, lambda, true)?;
    b.harvest(&mut tape, &mut state);
    let analytic: Vec<Vec<f64>> = state
        .params
        .iter_mut()
        .map(|p| p.take_grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut picks: Vec<(usize, usize)> = state
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (i, rng.gen_range(0..p.len())))
        .collect();
    let sizes: Vec<usize> = state.params.iter().map(Tensor2::len).collect();
    let all: usize = sizes.iter().sum();
    while picks.len() < coords {
        let mut k = rng.gen_range(0..all);
        let mut i = 0;
        while k >= sizes[i] {
            k -= sizes[i];
            i += 1;
        }
        picks.push((i, k));
    }

    let mut params: Vec<Tensor2<f64>> = state.params.iter().map(Tensor2::detached).collect();
    let mut probe_state = state.clone();
    let f = |p: &[Tensor2<f64>]| {
        for (dst, src) in probe_state.params.iter_mut().zip(p) {
            dst.data_mut().copy_from_slice(src.data());
        }
        total(&probe_state, &win, &pair, lambda, false)
            .map(|r| r.2)
            .unwrap_or(f64::NAN)
    };
    Ok(probe_all(f, &mut params, &analytic, &picks, h))
}
