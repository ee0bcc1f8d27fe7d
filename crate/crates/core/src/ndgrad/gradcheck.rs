use super::tensor::Tensor2;

/// Denominator floor for relative error so that near-zero gradients are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central difference of `f` with respect to one coordinate of one parameter.
/// The coordinate is restored before returning.
pub fn central_difference(
    f: &mut impl FnMut(&[Tensor2<f64>]) -> f64,
    params: &mut [Tensor2<f64>],
    param: usize,
    index: usize,
    h: f64,
) -> f64 {
    let orig = params[param].data()[index];
    params[param].data_mut()[index] = orig + h;
    let plus = f(params);
    params[param].data_mut()[index] = orig - h;
    let minus = f(params);
    params[param].data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients against central differences at the given
/// `(param, index)` coordinates.
pub fn probe_all(
    mut f: impl FnMut(&[Tensor2<f64>]) -> f64,
    params: &mut [Tensor2<f64>],
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Vec<Probe> {
    coords
        .iter()
        .map(|&(param, index)| {
            let numeric = central_difference(&mut f, params, param, index, h);
            let a = analytic[param][index];
            Probe {
                param,
                index,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            }
        })
        .collect()
}
