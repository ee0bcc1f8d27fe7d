mod common;

use common::suites::{point_adjust_suite, random_case};
use madt::container::Container;
use madt::diagnosis::{
    calibrate, evaluate, point_adjust, rank_desc, segments_from_labels, severity_from_rows,
    softmax_neg, Segment, ThresholdRule,
};
use madt::ndgrad::Tensor2;
use madt::statemat::{spatial_state_matrix, temporal_state_matrix, TimeWindow};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -50.0f64..50.0
}

fn window_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..9, 2usize..6).prop_flat_map(|(w, n)| {
        (Just(w), Just(n), prop::collection::vec(-5.0f64..5.0, w * n))
    })
}

/// Timeline with disjoint truth segments, as labels.
fn labelled() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::bool::weighted(0.15), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
        )
    })
}

fn f1(pred: &[bool], truth: &[bool]) -> f64 {
    evaluate(pred, truth).unwrap().metrics().map_or(0.0, |m| m.f1)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(finite(), 1..40)) {
        let p = softmax_neg(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        // Lower alignment, larger weight.
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn point_adjust_is_idempotent_and_monotone((pred, truth) in labelled(), extra in prop::collection::vec(prop::bool::ANY, 120)) {
        let segs = segments_from_labels(&truth);
        let once = point_adjust(&pred, &segs).unwrap();
        prop_assert_eq!(&point_adjust(&once, &segs).unwrap(), &once);
        let more: Vec<bool> = pred.iter().zip(&extra).map(|(&p, &e)| p || e).collect();
        let adj_more = point_adjust(&more, &segs).unwrap();
        prop_assert!(once.iter().zip(&adj_more).all(|(&a, &b)| !a || b));
        prop_assert!(pred.iter().zip(&once).all(|(&p, &a)| !p || a));
    }

    #[test]
    fn adjustment_never_lowers_f1((pred, truth) in labelled()) {
        let segs = segments_from_labels(&truth);
        let adj = point_adjust(&pred, &segs).unwrap();
        prop_assert!(f1(&adj, &truth) >= f1(&pred, &truth) - 1e-12);
    }

    #[test]
    fn segments_reproduce_labels(truth in prop::collection::vec(prop::bool::ANY, 0..100)) {
        let segs = segments_from_labels(&truth);
        let mut back = vec![false; truth.len()];
        for s in &segs {
            back[s.start..=s.end].iter_mut().for_each(|b| *b = true);
        }
        prop_assert_eq!(back, truth);
        for pair in segs.windows(2) {
            prop_assert!(pair[0].end + 1 < pair[1].start);
        }
    }

    #[test]
    fn ranking_ignores_positive_rescaling(v in prop::collection::vec(0.0f64..100.0, 1..20), c in 0.01f64..1000.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let r = rank_desc(&v);
        let is_desc = |s: &[f64], r: &[usize]| r.windows(2).all(|p| s[p[0]] >= s[p[1]]);
        prop_assert!(is_desc(&v, &r));
        prop_assert!(is_desc(&scaled, &rank_desc(&scaled)));
        let mut seen = r.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
        // Exact rescaling of distinct values never reorders them.
        let mut distinct = v.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if distinct.len() == v.len() && c.fract() == 0.0 {
            prop_assert_eq!(rank_desc(&scaled), r);
        }
    }

    #[test]
    fn severity_grows_as_threshold_falls(rows in prop::collection::vec(0.0f64..10.0, 1..50), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let s_lo = severity_from_rows(rows.clone(), lo);
        let s_hi = severity_from_rows(rows, hi);
        prop_assert!(s_lo.duration >= s_hi.duration);
        prop_assert!(s_hi.mask.iter().zip(&s_lo.mask).all(|(&h, &l)| !h || l));
    }

    #[test]
    fn ratio_rule_flags_at_most_r(scores in prop::collection::vec(finite(), 1..300), r in 0.001f64..0.5) {
        let (th, _) = calibrate(&scores, ThresholdRule::Ratio { r }, None).unwrap();
        let flagged = scores.iter().filter(|&&s| s > th).count();
        prop_assert!(flagged as f64 <= r * scores.len() as f64 + 1e-9);
    }

    #[test]
    fn betamax_without_labels_flags_no_validation_point(scores in prop::collection::vec(0.0f64..50.0, 1..100), beta in 1.0f64..=2.0) {
        let (th, rule) = calibrate(&scores, ThresholdRule::BetaMax { beta }, None).unwrap();
        prop_assert_eq!(rule, ThresholdRule::BetaMax { beta });
        prop_assert!(scores.iter().all(|&s| s <= th));
    }

    #[test]
    fn state_matrices_are_symmetric_gram_matrices((w, n, data) in window_strategy(), tau in 0.1f64..10.0) {
        let win = TimeWindow::new(Tensor2::from_vec(w, n, data).unwrap(), 0).unwrap();
        for m in [temporal_state_matrix(&win, tau).unwrap(), spatial_state_matrix(&win, tau).unwrap()] {
            for i in 0..m.rows() {
                prop_assert!(m.get(i, i) >= 0.0);
                for j in 0..m.cols() {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    prop_assert!(m.get(i, j).abs() <= (m.get(i, i) * m.get(j, j)).sqrt() + 1e-9);
                }
            }
        }
    }

    #[test]
    fn permuting_sensors_permutes_spatial_matrix((w, n, data) in window_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let x = Tensor2::from_vec(w, n, data).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut common::rng(seed));
        let mut px = Tensor2::zeros(w, n);
        for t in 0..w {
            for (j, &p) in perm.iter().enumerate() {
                px.set(t, j, x.get(t, p));
            }
        }
        let s = spatial_state_matrix(&TimeWindow::new(x.clone(), 0).unwrap(), 2.0).unwrap();
        let ps = spatial_state_matrix(&TimeWindow::new(px.clone(), 0).unwrap(), 2.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(ps.get(i, j), s.get(perm[i], perm[j]));
            }
        }
        // Sensor order does not change the temporal matrix beyond rounding.
        let t = temporal_state_matrix(&TimeWindow::new(x, 0).unwrap(), 2.0).unwrap();
        let pt = temporal_state_matrix(&TimeWindow::new(px, 0).unwrap(), 2.0).unwrap();
        prop_assert!(t.max_abs_diff(&pt) < 1e-12);
    }

    #[test]
    fn container_round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>(), key in "[a-z_]{1,8}", val in "[ -~]{0,20}") {
        let data = common::randn(&mut common::rng(seed), rows.max(1), cols.max(1));
        let t = Tensor2::<f64>::from_vec(rows, cols, data.concat()[..rows * cols].to_vec()).unwrap();
        let mut c = Container::new("test");
        c.set_meta(&key, &val);
        c.push_tensor("t", &t);
        c.push_tensor("t32", &t.cast::<f32>());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.meta(&key), Some(val.as_str()));
        prop_assert_eq!(back.tensor::<f64>("t").unwrap(), t.clone());
        prop_assert_eq!(back.tensor::<f32>("t32").unwrap(), t.cast::<f32>());
    }
}

#[test]
fn point_adjust_on_a_thousand_random_cases() {
    assert_eq!(point_adjust_suite(1000, 77), 0);
}

#[test]
fn point_adjust_rejects_bad_segments() {
    let pred = vec![false; 10];
    let overlap = [Segment { start: 1, end: 4 }, Segment { start: 4, end: 6 }];
    assert!(point_adjust(&pred, &overlap).is_err());
    assert!(point_adjust(&pred, &[Segment { start: 8, end: 10 }]).is_err());
    let (p, s) = random_case(&mut common::rng(3));
    assert_eq!(point_adjust(&p, &s).unwrap().len(), p.len());
}
