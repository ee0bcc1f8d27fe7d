//! Temporal (`w x w`) and spatial (`n x n`) state matrices of a window.

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor2};

/// `w` timesteps by `n` sensors, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow<T: Real> {
    values: Tensor2<T>,
    start_index: usize,
}

impl<T: Real> TimeWindow<T> {
    pub fn new(values: Tensor2<T>, start_index: usize) -> Result<Self> {
        let (w, n) = values.shape();
        if w < 2 || n < 2 {
            return Err(Error::Input(format!(
                "window must have at least 2 timesteps and 2 sensors, got {w}x{n}"
            )));
        }
        if !values.is_finite() {
            return Err(Error::Input(format!(
                "window starting at {start_index} contains non-finite values"
            )));
        }
        Ok(TimeWindow {
            values,
            start_index,
        })
    }

    pub fn values(&self) -> &Tensor2<T> {
        &self.values
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sensors(&self) -> usize {
        self.values.cols()
    }
}

/// Both state matrices of one window together with their temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrixPair<T: Real> {
    pub temporal: Tensor2<T>,
    pub spatial: Tensor2<T>,
    pub tau_t: f64,
    pub tau_s: f64,
}

impl<T: Real> StateMatrixPair<T> {
    pub fn build(win: &TimeWindow<T>, tau_t: f64, tau_s: f64) -> Result<Self> {
        Ok(StateMatrixPair {
            temporal: temporal_state_matrix(win, tau_t)?,
            spatial: spatial_state_matrix(win, tau_s)?,
            tau_t,
            tau_s,
        })
    }
}

/// Default temperatures: `tau_t = n`, `tau_s = w`, so entries are averages
/// rather than sums of products.
pub fn default_taus(w: usize, n: usize) -> (f64, f64) {
    (n as f64, w as f64)
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

/// `T[i][j] = <x_i, x_j> / tau_t` over timestep rows.
pub fn temporal_state_matrix<T: Real>(win: &TimeWindow<T>, tau_t: f64) -> Result<Tensor2<T>> {
    check_tau("tau_t", tau_t)?;
    Ok(gram(win.values(), false, T::of(1.0 / tau_t)))
}

/// `S[i][j] = <x^i, x^j> / tau_s` over sensor columns.
pub fn spatial_state_matrix<T: Real>(win: &TimeWindow<T>, tau_s: f64) -> Result<Tensor2<T>> {
    check_tau("tau_s", tau_s)?;
    Ok(gram(win.values(), true, T::of(1.0 / tau_s)))
}

/// Scaled Gram matrix of rows (`columns = false`) or columns. Only the upper
/// triangle is computed and mirrored so the result is exactly symmetric.
fn gram<T: Real>(x: &Tensor2<T>, columns: bool, scale: T) -> Tensor2<T> {
    let (rows, cols) = x.shape();
    let (m, len) = if columns { (cols, rows) } else { (rows, cols) };
    let at = |v: usize, k: usize| {
        if columns {
            x.get(k, v)
        } else {
            x.get(v, k)
        }
    };
    let mut out = Tensor2::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut s = T::zero();
            for k in 0..len {
                s += at(i, k) * at(j, k);
            }
            let v = s * scale;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}
