//! Association alignment, reconstruction and total training objective.
//!
//! Alignment compares the row distributions of two association maps with a
//! symmetric KL divergence. Maps of different sizes (`w x w` against
//! `n x n`) are first mean-pooled over rows and resampled to a common
//! length by contiguous-bin mass aggregation; see [`resample_matrix`].

use crate::error::{Error, Result};
use crate::model::{AssociationMaps, ForwardVars, LayerMapVars};
use crate::ndgrad::{Real, Tape, Tensor2, Var};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-row symmetric KL, `KL(p_i||q_i) + KL(q_i||p_i)`, as a `rows x 1`
/// column.
///
/// Evaluated as `sum_j (p_ij - q_ij) * (ln p_ij - ln q_ij)` with both
/// logarithm arguments floored, which is algebraically the same sum and
/// never negative.
pub fn sym_kl_rows<T: Real>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::dim("sym_kl_rows", tape.shape(p), tape.shape(q)));
    }
    let floor = T::of(LOG_FLOOR);
    let pf = tape.clamp_min(p, floor);
    let qf = tape.clamp_min(q, floor);
    let lp = tape.log(pf)?;
    let lq = tape.log(qf)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(dp, dl)?;
    Ok(tape.row_sum(prod))
}

fn mean_of<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    if vars.len() == 1 {
        Ok(acc)
    } else {
        Ok(tape.scale(acc, T::of(1.0 / vars.len() as f64)))
    }
}

/// Layer mean of the per-timestep series/temporal divergence (`w x 1`).
/// `None` when the temporal branch is disabled.
pub fn align_seri_temp<T: Real>(tape: &mut Tape<T>, maps: &[LayerMapVars]) -> Result<Option<Var>> {
    if maps.is_empty() {
        return Err(Error::Contract("no layers".into()));
    }
    let mut per_layer = Vec::with_capacity(maps.len());
    for m in maps {
        let Some(temp) = m.temp else { return Ok(None) };
        per_layer.push(sym_kl_rows(tape, m.seri, temp)?);
    }
    mean_of(tape, &per_layer).map(Some)
}

/// `m x len` mass-aggregation matrix: entry `(i, k)` is the overlap of the
/// unit cell `[i, i+1)` with bin `[k*m/len, (k+1)*m/len)`. Each row sums to
/// one, so the map preserves total mass.
pub fn resample_matrix<T: Real>(m: usize, len: usize) -> Tensor2<T> {
    let mut r = Tensor2::zeros(m, len);
    let width = m as f64 / len as f64;
    for i in 0..m {
        let (lo, hi) = (i as f64, (i + 1) as f64);
        let first = ((lo / width).floor() as usize).min(len - 1);
        for k in first..len {
            let (blo, bhi) = (k as f64 * width, (k + 1) as f64 * width);
            if blo >= hi {
                break;
            }
            let overlap = hi.min(bhi) - lo.max(blo);
            if overlap > 0.0 {
                r.set(i, k, T::of(overlap));
            }
        }
    }
    r
}

fn check_cross_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.0 < 2 || b.0 < 2 {
        return Err(Error::Parameter(format!(
            "cross-dimension divergence needs at least 2 positions, got {a:?} and {b:?}"
        )));
    }
    Ok(())
}

fn resampled<T: Real>(tape: &mut Tape<T>, rows: Var, len: usize) -> Result<Var> {
    let m = tape.shape(rows).1;
    if m == len {
        return tape.normalize_rows(rows);
    }
    let r = tape.constant(resample_matrix(m, len));
    let y = tape.matmul(rows, r)?;
    tape.normalize_rows(y)
}

/// Symmetric KL between the row-mean distributions of `a` (`m x m`) and
/// `b` (`r x r`) after resampling both to length `min(m, r)`. Returns 1x1.
pub fn cross_dim_kl<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_cross_dims(tape.shape(a), tape.shape(b))?;
    let len = tape.shape(a).1.min(tape.shape(b).1);
    let pa = tape.mean_rows(a);
    let pa = resampled(tape, pa, len)?;
    let pb = tape.mean_rows(b);
    let pb = resampled(tape, pb, len)?;
    sym_kl_rows(tape, pa, pb)
}

/// One divergence per row of `a`: each row resampled on its own against the
/// pooled, resampled distribution of `b`. Returns `m x 1`.
pub fn cross_dim_kl_rowwise<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_cross_dims(tape.shape(a), tape.shape(b))?;
    let m = tape.shape(a).0;
    let len = tape.shape(a).1.min(tape.shape(b).1);
    let ra = resampled(tape, a, len)?;
    let pb = tape.mean_rows(b);
    let pb = resampled(tape, pb, len)?;
    let ones = tape.constant(Tensor2::filled(m, 1, T::one()));
    let tiled = tape.matmul(ones, pb)?;
    sym_kl_rows(tape, ra, tiled)
}

/// Layer mean of `rowwise(Space -> Seri)`, one value per sensor.
pub fn align_seri_space_rowwise<T: Real>(
    tape: &mut Tape<T>,
    maps: &[LayerMapVars],
) -> Result<Option<Var>> {
    let mut per_layer = Vec::with_capacity(maps.len());
    for m in maps {
        let Some(space) = m.space else { return Ok(None) };
        per_layer.push(cross_dim_kl_rowwise(tape, space, m.seri)?);
    }
    mean_of(tape, &per_layer).map(Some)
}

fn layer_mean_cross<T: Real>(
    tape: &mut Tape<T>,
    maps: &[LayerMapVars],
    pick: impl Fn(&LayerMapVars) -> Option<(Var, Var)>,
) -> Result<Option<Var>> {
    let mut per_layer = Vec::with_capacity(maps.len());
    for m in maps {
        let Some((a, b)) = pick(m) else { return Ok(None) };
        per_layer.push(cross_dim_kl(tape, a, b)?);
    }
    let mean = mean_of(tape, &per_layer)?;
    Ok(Some(tape.abs(mean)))
}

/// Tape handles for every loss component of one window.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon_x: Var,
    pub recon_t: Option<Var>,
    pub recon_s: Option<Var>,
    pub align_st: Option<Var>,
    pub align_ssp: Option<Var>,
    pub align_tsp: Option<Var>,
    pub align_total: Option<Var>,
    pub recon_total: Var,
    pub total: Var,
    pub pointwise: Option<Var>,
    pub rowwise: Option<Var>,
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub recon_x: f64,
    pub recon_t: f64,
    pub recon_s: f64,
    pub align_st: f64,
    pub align_ssp: f64,
    pub align_tsp: f64,
    pub total: f64,
    pub align_seri_temp_pointwise: Vec<f64>,
    pub align_seri_space_rowwise: Vec<f64>,
}

impl LossBreakdown {
    pub fn recon(&self) -> f64 {
        self.recon_x + self.recon_t + self.recon_s
    }

    pub fn align(&self) -> f64 {
        self.align_st + self.align_ssp + self.align_tsp
    }
}

/// `sum ||x - x~||_F^2` over the enabled reconstructions as
/// `(recon_x, recon_t, recon_s)`.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    x: Var,
    tm: Option<Var>,
    sm: Option<Var>,
) -> Result<(Var, Option<Var>, Option<Var>)> {
    let frob = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        Ok(tape.frobenius_sq(d))
    };
    let rx = frob(tape, x, out.x_hat)?;
    let rt = match (out.t_hat, tm) {
        (Some(h), Some(t)) => Some(frob(tape, t, h)?),
        _ => None,
    };
    let rs = match (out.s_hat, sm) {
        (Some(h), Some(s)) => Some(frob(tape, s, h)?),
        _ => None,
    };
    Ok((rx, rt, rs))
}

fn sum_some<T: Real>(tape: &mut Tape<T>, parts: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for p in parts.iter().flatten() {
        acc = Some(match acc {
            None => *p,
            Some(a) => tape.add(a, *p)?,
        });
    }
    Ok(acc)
}

/// Reconstruction plus `lambda` times the alignment total. With
/// `lambda == 0` alignment terms are still evaluated (for scoring) but kept
/// out of the objective.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    x: Var,
    tm: Option<Var>,
    sm: Option<Var>,
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let (rx, rt, rs) = reconstruction_loss(tape, out, x, tm, sm)?;
    let pointwise = align_seri_temp(tape, &out.maps)?;
    let align_st = pointwise.map(|p| {
        let a = tape.abs(p);
        tape.sum(a)
    });
    let align_ssp = layer_mean_cross(tape, &out.maps, |m| m.space.map(|s| (m.seri, s)))?;
    let align_tsp = layer_mean_cross(tape, &out.maps, |m| match (m.temp, m.space) {
        (Some(t), Some(s)) => Some((t, s)),
        _ => None,
    })?;
    let rowwise = align_seri_space_rowwise(tape, &out.maps)?;
    let recon_total = sum_some(tape, &[Some(rx), rt, rs])?.expect("recon_x present");
    let align_total = sum_some(tape, &[align_st, align_ssp, align_tsp])?;
    let total = match align_total {
        Some(a) if lambda > 0.0 => {
            let scaled = tape.scale(a, T::of(lambda));
            tape.add(recon_total, scaled)?
        }
        _ => recon_total,
    };
    Ok(LossVars {
        recon_x: rx,
        recon_t: rt,
        recon_s: rs,
        align_st,
        align_ssp,
        align_tsp,
        align_total,
        recon_total,
        total,
        pointwise,
        rowwise,
    })
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let s = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        let vec = |v: Option<Var>| v.map_or_else(Vec::new, |v| tape.value(v).to_f64_vec());
        LossBreakdown {
            recon_x: s(Some(self.recon_x)),
            recon_t: s(self.recon_t),
            recon_s: s(self.recon_s),
            align_st: s(self.align_st),
            align_ssp: s(self.align_ssp),
            align_tsp: s(self.align_tsp),
            total: s(Some(self.total)),
            align_seri_temp_pointwise: vec(self.pointwise),
            align_seri_space_rowwise: vec(self.rowwise),
        }
    }
}

/// Value-level helpers that evaluate the tape definitions on constants.
pub mod values {
    use super::*;

    fn one_shot<T: Real, R>(f: impl FnOnce(&mut Tape<T>) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        f(&mut tape)
    }

    pub fn sym_kl_rows<T: Real>(p: &Tensor2<T>, q: &Tensor2<T>) -> Result<Vec<f64>> {
        one_shot(|tape: &mut Tape<T>| {
            let (a, b) = (tape.constant(p.detached()), tape.constant(q.detached()));
            let v = super::sym_kl_rows(tape, a, b)?;
            Ok(tape.value(v).to_f64_vec())
        })
    }

    pub fn cross_dim_kl<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<f64> {
        one_shot(|tape: &mut Tape<T>| {
            let (x, y) = (tape.constant(a.detached()), tape.constant(b.detached()));
            let v = super::cross_dim_kl(tape, x, y)?;
            Ok(tape.value(v).item().as_f64())
        })
    }

    pub fn cross_dim_kl_rowwise<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Vec<f64>> {
        one_shot(|tape: &mut Tape<T>| {
            let (x, y) = (tape.constant(a.detached()), tape.constant(b.detached()));
            let v = super::cross_dim_kl_rowwise(tape, x, y)?;
            Ok(tape.value(v).to_f64_vec())
        })
    }

    fn bind_maps<T: Real>(tape: &mut Tape<T>, maps: &AssociationMaps<T>) -> Vec<LayerMapVars> {
        maps.layers
            .iter()
            .map(|l| LayerMapVars {
                seri: tape.constant(l.seri.detached()),
                temp: l.temp.as_ref().map(|t| tape.constant(t.detached())),
                space: l.space.as_ref().map(|t| tape.constant(t.detached())),
            })
            .collect()
    }

    /// Per-timestep series/temporal alignment (length `w`).
    pub fn align_seri_temp<T: Real>(maps: &AssociationMaps<T>) -> Result<Option<Vec<f64>>> {
        one_shot(|tape: &mut Tape<T>| {
            let vars = bind_maps(tape, maps);
            Ok(super::align_seri_temp(tape, &vars)?.map(|v| tape.value(v).to_f64_vec()))
        })
    }

    /// Per-sensor spatial/series alignment (length `n`).
    pub fn align_seri_space_rowwise<T: Real>(maps: &AssociationMaps<T>) -> Result<Option<Vec<f64>>> {
        one_shot(|tape: &mut Tape<T>| {
            let vars = bind_maps(tape, maps);
            Ok(super::align_seri_space_rowwise(tape, &vars)?.map(|v| tape.value(v).to_f64_vec()))
        })
    }

    /// Alignment total (sum of the three alignment terms).
    pub fn align_total<T: Real>(maps: &AssociationMaps<T>) -> Result<f64> {
        one_shot(|tape: &mut Tape<T>| {
            let vars = bind_maps(tape, maps);
            let fv = ForwardVars {
                x_hat: tape.constant(Tensor2::zeros(1, 1)),
                t_hat: None,
                s_hat: None,
                maps: vars,
            };
            let x = fv.x_hat;
            let lv = super::total_loss(tape, &fv, x, None, None, 0.0)?;
            Ok(lv.align_total.map_or(0.0, |v| tape.value(v).item().as_f64()))
        })
    }
}
