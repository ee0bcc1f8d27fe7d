//! Brute-force reference implementations written directly from the
//! formulas, sharing no code with the library beyond plain data types.
#![allow(dead_code)]

pub mod suites;

use madt::model::{AssociationMaps, LayerMaps, ModelState};
use madt::ndgrad::Tensor2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn stochastic(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    randn(rng, r, c)
        .into_iter()
        .map(|row| {
            let e: Vec<f64> = row.iter().map(|x| (1.5 * x).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn tensor(m: &Mat) -> Tensor2<f64> {
    Tensor2::from_rows(m)
}

pub fn mat(t: &Tensor2<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_diff_mat(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_diff(x, y)).fold(0.0, f64::max)
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|row| row.iter().zip(bias).map(|(x, b)| x + b).collect())
        .collect()
}

/// `T[i][j] = sum_k x[i][k] x[j][k] / tau`.
pub fn temporal(x: &Mat, tau: f64) -> Mat {
    let w = x.len();
    let mut t = vec![vec![0.0; w]; w];
    for i in 0..w {
        for j in 0..w {
            let mut s = 0.0;
            for k in 0..x[0].len() {
                s += x[i][k] * x[j][k];
            }
            t[i][j] = s / tau;
        }
    }
    t
}

/// `S[i][j] = sum_t x[t][i] x[t][j] / tau`.
pub fn spatial(x: &Mat, tau: f64) -> Mat {
    let n = x[0].len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for row in x {
                acc += row[i] * row[j];
            }
            s[i][j] = acc / tau;
        }
    }
    s
}

/// `KL(p||q)` with both logarithm arguments floored.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(EPS).ln() - b.max(EPS).ln()))
        .sum()
}

pub fn sym_kl_rows(p: &Mat, q: &Mat) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(a, b)| kl(a, b) + kl(b, a))
        .collect()
}

/// Contiguous-bin mass aggregation of a length-`m` distribution to length
/// `len`, computed on a refined grid: every unit cell is cut into `len`
/// equal pieces, and each target bin then covers exactly `m` pieces.
pub fn resample(p: &[f64], len: usize) -> Vec<f64> {
    let m = p.len();
    let mut out = vec![0.0; len];
    for (i, &mass) in p.iter().enumerate() {
        for piece in 0..len {
            let fine = i * len + piece;
            out[fine / m] += mass / len as f64;
        }
    }
    let z: f64 = out.iter().sum();
    out.into_iter().map(|x| x / z).collect()
}

pub fn row_mean(a: &Mat) -> Vec<f64> {
    let c = a[0].len();
    (0..c)
        .map(|j| a.iter().map(|row| row[j]).sum::<f64>() / a.len() as f64)
        .collect()
}

/// Per-row divergence of `a` (resampled row by row) against the pooled and
/// resampled distribution of `b`.
pub fn cross_rowwise(a: &Mat, b: &Mat) -> Vec<f64> {
    let len = a[0].len().min(b[0].len());
    let pb = resample(&row_mean(b), len);
    a.iter()
        .map(|row| {
            let pa = resample(row, len);
            kl(&pa, &pb) + kl(&pb, &pa)
        })
        .collect()
}

pub fn cross_pooled(a: &Mat, b: &Mat) -> f64 {
    let len = a[0].len().min(b[0].len());
    let pa = resample(&row_mean(a), len);
    let pb = resample(&row_mean(b), len);
    kl(&pa, &pb) + kl(&pb, &pa)
}

pub struct Layer {
    pub seri: Mat,
    pub temp: Mat,
    pub space: Mat,
}

pub fn random_layers(rng: &mut ChaCha8Rng, k: usize, w: usize, n: usize) -> Vec<Layer> {
    (0..k)
        .map(|_| Layer {
            seri: stochastic(rng, w, w),
            temp: stochastic(rng, w, w),
            space: stochastic(rng, n, n),
        })
        .collect()
}

pub fn to_maps(layers: &[Layer]) -> AssociationMaps<f64> {
    AssociationMaps {
        layers: layers
            .iter()
            .map(|l| LayerMaps {
                seri: tensor(&l.seri),
                temp: Some(tensor(&l.temp)),
                space: Some(tensor(&l.space)),
            })
            .collect(),
    }
}

pub fn align_seri_temp(layers: &[Layer]) -> Vec<f64> {
    let w = layers[0].seri.len();
    let mut acc = vec![0.0; w];
    for l in layers {
        for (a, v) in acc.iter_mut().zip(sym_kl_rows(&l.seri, &l.temp)) {
            *a += v / layers.len() as f64;
        }
    }
    acc
}

pub fn align_space_rowwise(layers: &[Layer]) -> Vec<f64> {
    let n = layers[0].space.len();
    let mut acc = vec![0.0; n];
    for l in layers {
        for (a, v) in acc.iter_mut().zip(cross_rowwise(&l.space, &l.seri)) {
            *a += v / layers.len() as f64;
        }
    }
    acc
}

/// `exp(-v_i) / sum_j exp(-v_j)`.
pub fn softmax_neg(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = v.iter().map(|x| (-(x - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn weighted_row_residual(m: &Mat, m_hat: &Mat, weights: &[f64]) -> Vec<f64> {
    m.iter()
        .zip(m_hat)
        .zip(weights)
        .map(|((a, b), w)| {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            s * w
        })
        .collect()
}

pub fn point_scores(x: &Mat, x_hat: &Mat, layers: &[Layer]) -> Vec<f64> {
    weighted_row_residual(x, x_hat, &softmax_neg(&align_seri_temp(layers)))
}

pub fn sensor_scores(s: &Mat, s_hat: &Mat, layers: &[Layer]) -> Vec<f64> {
    weighted_row_residual(s, s_hat, &softmax_neg(&align_space_rowwise(layers)))
}

pub fn temporal_scores(t: &Mat, t_hat: &Mat, layers: &[Layer]) -> Vec<f64> {
    weighted_row_residual(t, t_hat, &softmax_neg(&align_seri_temp(layers)))
}

/// Sensor indices ordered by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            if scores[b] > scores[a] {
                idx.swap(j, j + 1);
            }
        }
    }
    idx
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn param(state: &ModelState<f64>, name: &str) -> Mat {
    let i = state
        .index_of(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    mat(&state.params[i])
}

/// One branch of the multi-branch attention, step by step: project to
/// Q, K, V; for each head l take column block l, form
/// `softmax(Q_l K_l^T * sqrt(h / d))`, multiply by `V_l`; concatenate the
/// heads, apply the output projection. Also returns the head-mean map.
pub fn attention_branch(state: &ModelState<f64>, prefix: &str, hidden: &Mat) -> (Mat, Mat) {
    let cfg = state.config;
    let (d, h) = (cfg.d, cfg.heads);
    let dh = d / h;
    let q = matmul(hidden, &param(state, &format!("{prefix}.w_q")));
    let k = matmul(hidden, &param(state, &format!("{prefix}.w_k")));
    let v = matmul(hidden, &param(state, &format!("{prefix}.w_v")));
    let rows = hidden.len();
    let scale = (h as f64 / d as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; rows];
    let mut mean_map = vec![vec![0.0; rows]; rows];
    for l in 0..h {
        let cols = l * dh..(l + 1) * dh;
        let ql: Mat = q.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let kl_: Mat = k.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let vl: Mat = v.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let mut map = Vec::with_capacity(rows);
        for i in 0..rows {
            let logits: Vec<f64> = (0..rows)
                .map(|j| {
                    let dot: f64 = (0..dh).map(|c| ql[i][c] * kl_[j][c]).sum();
                    dot * scale
                })
                .collect();
            map.push(softmax_row(&logits));
        }
        let head_out = matmul(&map, &vl);
        for i in 0..rows {
            for c in 0..dh {
                concat[i][l * dh + c] = head_out[i][c];
            }
            for j in 0..rows {
                mean_map[i][j] += map[i][j] / h as f64;
            }
        }
    }
    let w_o = param(state, &format!("{prefix}.out.weight"));
    let b_o = param(state, &format!("{prefix}.out.bias"));
    (add_bias(&matmul(&concat, &w_o), &b_o[0]), mean_map)
}

/// Number of set flags.
pub fn flagged(v: &[bool]) -> usize {
    v.iter().filter(|&&b| b).count()
}
