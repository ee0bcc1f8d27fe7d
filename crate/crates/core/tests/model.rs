mod common;

use common::suites::{attention_suite, distribution_suite};
use common::*;
use madt::model::{
    check_total_loss, layer_forward, mad_attention, Bound, Checkpoint, ModelConfig, ModelState,
};
use madt::ndgrad::{Tape, Tensor2};
use madt::statemat::{default_taus, StateMatrixPair, TimeWindow};

fn window(cfg: &ModelConfig, seed: u64) -> (TimeWindow<f64>, StateMatrixPair<f64>) {
    let x = randn(&mut rng(seed), cfg.w, cfg.n);
    let win = TimeWindow::new(tensor(&x), 0).unwrap();
    let (tt, ts) = default_taus(cfg.w, cfg.n);
    let pair = StateMatrixPair::build(&win, tt, ts).unwrap();
    (win, pair)
}

fn set(state: &mut ModelState<f64>, name: &str, t: Tensor2<f64>) {
    let i = state.index_of(name).unwrap();
    assert_eq!(state.params[i].shape(), t.shape(), "{name}");
    state.params[i] = t;
}

#[test]
fn attention_follows_the_step_by_step_reference() {
    let cfg = ModelConfig::tiny(4, 3, 4, 2, 1);
    let err = attention_suite(cfg, 20, 31);
    assert!(err <= 1e-10, "max deviation {err}");
    let wider = ModelConfig::tiny(7, 5, 12, 3, 1);
    assert!(attention_suite(wider, 5, 3) <= 1e-10);
}

#[test]
fn uniform_attention_averages_values() {
    let cfg = ModelConfig::tiny(5, 3, 4, 1, 1);
    let mut state = ModelState::<f64>::init(cfg, 0).unwrap();
    for tag in ["x", "tm", "sm"] {
        set(&mut state, &format!("layer0.{tag}.w_q"), Tensor2::zeros(4, 4));
        set(&mut state, &format!("layer0.{tag}.w_k"), Tensor2::zeros(4, 4));
        set(&mut state, &format!("layer0.{tag}.w_v"), Tensor2::identity(4));
        set(&mut state, &format!("layer0.{tag}.out.weight"), Tensor2::identity(4));
    }
    let h = randn(&mut rng(2), 5, 4);
    let hs = randn(&mut rng(3), 3, 4);
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &state, false);
    let streams = [
        Some(tape.constant(tensor(&h))),
        Some(tape.constant(tensor(&h))),
        Some(tape.constant(tensor(&hs))),
    ];
    let (outs, maps) = mad_attention(&mut tape, &cfg, &b, &state.layout.layers[0], streams).unwrap();
    for (j, src) in [(0, &h), (1, &h), (2, &hs)] {
        let mean = row_mean(src);
        let out = mat(tape.value(outs[j].unwrap()));
        for row in &out {
            assert!(max_diff(row, &mean) < 1e-12);
        }
        let m = tape.value(maps[j].unwrap());
        assert!(m.data().iter().all(|&v| (v - 1.0 / m.cols() as f64).abs() < 1e-15));
    }
    assert_eq!(tape.shape(maps[0].unwrap()), (5, 5));
    assert_eq!(tape.shape(maps[2].unwrap()), (3, 3));
}

#[test]
fn zero_sublayers_leave_only_the_norm_path() {
    let cfg = ModelConfig::tiny(4, 3, 6, 2, 1);
    let mut state = ModelState::<f64>::init(cfg, 4).unwrap();
    for tag in ["x", "tm", "sm"] {
        for p in ["out.weight", "ff2.weight"] {
            set(&mut state, &format!("layer0.{tag}.{p}"), Tensor2::zeros(if p == "out.weight" { 6 } else { 24 }, 6));
        }
    }
    let hx = randn(&mut rng(8), 4, 6);
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &state, false);
    let x = tape.constant(tensor(&hx));
    let t = tape.constant(tensor(&hx));
    let s = tape.constant(tensor(&randn(&mut rng(9), 3, 6)));
    let (out, _) = layer_forward(&mut tape, &cfg, &b, &state.layout.layers[0], [Some(x), Some(t), Some(s)]).unwrap();
    let norm = |m: &Mat| -> Mat {
        m.iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - mu) / (var + cfg.eps_ln).sqrt()).collect()
            })
            .collect()
    };
    let want = norm(&norm(&hx));
    assert!(max_diff_mat(&mat(tape.value(out[0].unwrap())), &want) < 1e-12);
}

#[test]
fn forward_shapes_and_determinism() {
    let cfg = ModelConfig::tiny(9, 4, 8, 2, 2);
    let state = ModelState::<f64>::init(cfg, 1).unwrap();
    let (win, pair) = window(&cfg, 3);
    let a = state.forward(&win, &pair).unwrap();
    let b = state.forward(&win, &pair).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.x_hat.shape(), (9, 4));
    assert_eq!(a.t_hat.as_ref().unwrap().shape(), (9, 9));
    assert_eq!(a.s_hat.as_ref().unwrap().shape(), (4, 4));
    assert_eq!(a.maps.layers.len(), 2);
    let wrong = TimeWindow::new(tensor(&randn(&mut rng(1), 8, 4)), 0).unwrap();
    assert!(state.forward(&wrong, &pair).is_err());
}

#[test]
fn disabled_branches_produce_no_outputs() {
    let mut cfg = ModelConfig::tiny(6, 3, 4, 2, 1);
    cfg.temporal = false;
    let state = ModelState::<f64>::init(cfg, 1).unwrap();
    let (win, pair) = window(&cfg, 3);
    let out = state.forward(&win, &pair).unwrap();
    assert!(out.t_hat.is_none() && out.s_hat.is_some());
    assert!(out.maps.layers[0].temp.is_none());
    cfg.temporal = true;
    cfg.spatial = false;
    let state = ModelState::<f64>::init(cfg, 1).unwrap();
    let out = state.forward(&win, &pair).unwrap();
    assert!(out.s_hat.is_none() && out.t_hat.is_some());
}

#[test]
fn parameter_count_matches_allocation() {
    for cfg in [
        ModelConfig::tiny(8, 4, 16, 2, 1),
        ModelConfig::tiny(10, 3, 12, 3, 3),
        ModelConfig::desk(7),
        ModelConfig {
            spatial: false,
            ..ModelConfig::tiny(5, 2, 4, 4, 2)
        },
    ] {
        let state = ModelState::<f32>::init(cfg, 0).unwrap();
        let allocated: usize = state.params.iter().map(|p| p.len()).sum();
        assert_eq!(allocated, cfg.parameter_count(), "{cfg:?}");
    }
}

#[test]
fn maps_are_distributions() {
    let (rows, kl) = distribution_suite(ModelConfig::tiny(8, 4, 16, 2, 2), 10, 6);
    assert!(rows <= 1e-5, "row sum off by {rows}");
    assert!(kl >= -1e-9, "negative divergence {kl}");
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let probes = check_total_loss(ModelConfig::tiny(8, 4, 16, 2, 1), 19.0, 3, 200, 1e-4).unwrap();
    assert!(probes.len() >= 200);
    let worst = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_gives_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny(10, 4, 8, 2, 2);
    let state = ModelState::<f32>::init(cfg, 12).unwrap();
    let ck = Checkpoint {
        state,
        adam: None,
        sensors: (0..4).map(|i| format!("s{i}")).collect(),
        norm_mean: vec![0.0; 4],
        norm_std: vec![1.0; 4],
        tau_t: 4.0,
        tau_s: 10.0,
        extra_meta: Vec::new(),
        extra_tensors: Vec::new(),
    };
    let path = dir.path().join("m.madt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    let x: Tensor2<f32> = tensor(&randn(&mut rng(4), 10, 4)).cast();
    let win = TimeWindow::new(x, 0).unwrap();
    let pair = StateMatrixPair::build(&win, 4.0, 10.0).unwrap();
    let a = ck.state.forward(&win, &pair).unwrap();
    let b = back.state.forward(&win, &pair).unwrap();
    let bits = |t: &Tensor2<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.x_hat), bits(&b.x_hat));
    assert_eq!(bits(a.t_hat.as_ref().unwrap()), bits(b.t_hat.as_ref().unwrap()));
    assert_eq!(bits(a.s_hat.as_ref().unwrap()), bits(b.s_hat.as_ref().unwrap()));
}
