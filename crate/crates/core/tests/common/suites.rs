//! Randomized comparisons between library functions and the reference
//! implementations. Each suite returns the worst discrepancy observed.

use madt::diagnosis::{self, Segment};
use madt::losses::values;
use madt::model::{
    mad_attention, AssociationMaps, Bound, ForwardOutput, ModelConfig, ModelState,
};
use madt::ndgrad::Tape;
use madt::statemat::{spatial_state_matrix, temporal_state_matrix, TimeWindow};
use rand::Rng;

use super::*;

#[derive(Debug, Clone)]
pub struct Discrepancy {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
}

fn shape(rng: &mut rand_chacha::ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..=12), rng.gen_range(2..=7))
}

fn output(x_hat: &Mat, t_hat: &Mat, s_hat: &Mat, layers: &[Layer]) -> ForwardOutput<f64> {
    ForwardOutput {
        x_hat: tensor(x_hat),
        t_hat: Some(tensor(t_hat)),
        s_hat: Some(tensor(s_hat)),
        maps: to_maps(layers),
    }
}

/// State matrices, symmetric KL, point scores, localization and severity
/// against their references on `instances` random cases each.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<Discrepancy> {
    let mut rng = rng(seed);
    let mut errs = [0.0f64; 6];
    for _ in 0..instances {
        let (w, n) = shape(&mut rng);
        let tau_t = rng.gen_range(0.5..20.0);
        let tau_s = rng.gen_range(0.5..20.0);
        let x = randn(&mut rng, w, n);
        let win = TimeWindow::new(tensor(&x), 0).unwrap();

        let t = temporal_state_matrix(&win, tau_t).unwrap();
        errs[0] = errs[0].max(max_diff_mat(&mat(&t), &temporal(&x, tau_t)));
        let s = spatial_state_matrix(&win, tau_s).unwrap();
        errs[1] = errs[1].max(max_diff_mat(&mat(&s), &spatial(&x, tau_s)));

        let p = stochastic(&mut rng, w, w);
        let q = stochastic(&mut rng, w, w);
        let got = values::sym_kl_rows(&tensor(&p), &tensor(&q)).unwrap();
        errs[2] = errs[2].max(max_diff(&got, &sym_kl_rows(&p, &q)));

        let k = rng.gen_range(1..=3);
        let layers = random_layers(&mut rng, k, w, n);
        let x_hat = randn(&mut rng, w, n);
        let t_m = temporal(&x, tau_t);
        let s_m = spatial(&x, tau_s);
        let t_hat = randn(&mut rng, w, w);
        let s_hat = randn(&mut rng, n, n);
        let out = output(&x_hat, &t_hat, &s_hat, &layers);

        let got = diagnosis::anomaly_score(&win, &out).unwrap();
        errs[3] = errs[3].max(max_diff(&got, &point_scores(&x, &x_hat, &layers)));

        let loc = diagnosis::localize(&tensor(&s_m), &tensor(&s_hat), &out).unwrap();
        let want = sensor_scores(&s_m, &s_hat, &layers);
        let mut e = max_diff(&loc.scores, &want);
        if loc.ranking != ranking(&want) {
            e = f64::INFINITY;
        }
        errs[4] = errs[4].max(e);

        let rows = temporal_scores(&t_m, &t_hat, &layers);
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = rng.gen_range(0..w - 1);
        let delta = 0.5 * (sorted[k] + sorted[k + 1]);
        let sev = diagnosis::severity(&tensor(&t_m), &tensor(&t_hat), &out, delta).unwrap();
        let mask: Vec<bool> = rows.iter().map(|&r| r > delta).collect();
        let mut e = max_diff(&sev.row_scores, &rows);
        if sev.mask != mask || sev.duration != flagged(&mask) {
            e = f64::INFINITY;
        }
        errs[5] = errs[5].max(e);
    }
    let names = [
        "temporal_state_matrix",
        "spatial_state_matrix",
        "sym_kl_rows",
        "anomaly_score",
        "localize",
        "severity",
    ];
    names
        .iter()
        .zip(errs)
        .map(|(&name, max_err)| Discrepancy {
            name,
            instances,
            max_err,
        })
        .collect()
}

/// The multi-branch attention of one layer against the step-by-step
/// reference, on random parameters and hidden streams.
pub fn attention_suite(cfg: ModelConfig, instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let state = ModelState::<f64>::init(cfg, seed.wrapping_add(i as u64)).unwrap();
        let xs = randn(&mut rng, cfg.w, cfg.d);
        let ts = randn(&mut rng, cfg.w, cfg.d);
        let ss = randn(&mut rng, cfg.n, cfg.d);
        let mut tape = Tape::<f64>::new();
        let b = Bound::bind(&mut tape, &state, false);
        let streams = [
            Some(tape.constant(tensor(&xs))),
            Some(tape.constant(tensor(&ts))),
            Some(tape.constant(tensor(&ss))),
        ];
        let (outs, maps) =
            mad_attention(&mut tape, &cfg, &b, &state.layout.layers[0], streams).unwrap();
        for (j, (tag, hidden)) in [("x", &xs), ("tm", &ts), ("sm", &ss)]
            .into_iter()
            .enumerate()
        {
            let (want_out, want_map) = attention_branch(&state, &format!("layer0.{tag}"), hidden);
            let got_out = mat(tape.value(outs[j].unwrap()));
            let got_map = mat(tape.value(maps[j].unwrap()));
            worst = worst
                .max(max_diff_mat(&got_out, &want_out))
                .max(max_diff_mat(&got_map, &want_map));
        }
    }
    worst
}

/// Worst deviation of any association-map row sum from one, and the most
/// negative KL-derived value, over forward passes of random windows.
pub fn distribution_suite(cfg: ModelConfig, instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let mut row_err = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for i in 0..instances {
        let state = ModelState::<f64>::init(cfg, seed.wrapping_add(i as u64)).unwrap();
        let x = randn(&mut rng, cfg.w, cfg.n);
        let win = TimeWindow::new(tensor(&x), 0).unwrap();
        let pair = madt::statemat::StateMatrixPair::build(&win, cfg.n as f64, cfg.w as f64)
            .unwrap();
        let out = state.forward(&win, &pair).unwrap();
        for layer in &out.maps.layers {
            for m in [Some(&layer.seri), layer.temp.as_ref(), layer.space.as_ref()]
                .into_iter()
                .flatten()
            {
                for r in 0..m.rows() {
                    let s: f64 = m.row(r).iter().sum();
                    row_err = row_err.max((s - 1.0).abs());
                }
            }
        }
        min_kl = min_kl.min(kl_floor(&out.maps));
    }
    (row_err, min_kl)
}

fn kl_floor(maps: &AssociationMaps<f64>) -> f64 {
    let mut lo = values::align_total(maps).unwrap();
    for v in [
        values::align_seri_temp(maps).unwrap(),
        values::align_seri_space_rowwise(maps).unwrap(),
    ]
    .into_iter()
    .flatten()
    {
        lo = v.into_iter().fold(lo, f64::min);
    }
    for l in &maps.layers {
        if let (Some(t), Some(s)) = (&l.temp, &l.space) {
            lo = lo
                .min(values::cross_dim_kl(&l.seri, s).unwrap())
                .min(values::cross_dim_kl(t, s).unwrap())
                .min(values::sym_kl_rows(&l.seri, t).unwrap().into_iter().fold(f64::INFINITY, f64::min));
        }
    }
    lo
}

/// A random timeline with non-overlapping truth segments.
pub fn random_case(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<bool>, Vec<Segment>) {
    let len = rng.gen_range(1..=80);
    let pred: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.2)).collect();
    let mut segs = Vec::new();
    let mut t = rng.gen_range(0..=len);
    while t < len {
        let end = (t + rng.gen_range(0..8)).min(len - 1);
        segs.push(Segment { start: t, end });
        t = end + 1 + rng.gen_range(1..10);
    }
    (pred, segs)
}

/// Checks idempotence and monotonicity of point adjustment; returns the
/// number of cases that violated either.
pub fn point_adjust_suite(cases: usize, seed: u64) -> usize {
    let mut rng = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (pred, segs) = random_case(&mut rng);
        let once = diagnosis::point_adjust(&pred, &segs).unwrap();
        let twice = diagnosis::point_adjust(&once, &segs).unwrap();
        let mut more = pred.clone();
        for p in more.iter_mut() {
            if !*p && rng.gen_bool(0.3) {
                *p = true;
            }
        }
        let adj_more = diagnosis::point_adjust(&more, &segs).unwrap();
        let superset = pred.iter().zip(&once).all(|(&p, &a)| !p || a);
        let monotone = once.iter().zip(&adj_more).all(|(&a, &b)| !a || b);
        if once != twice || !superset || !monotone {
            bad += 1;
        }
    }
    bad
}
