use madt::diagnosis::ThresholdRule;
use madt::model::{Checkpoint, ModelConfig};
use madt::pipeline::config::TrainConfig;
use madt::pipeline::data::{make_windows, read_csv, write_csv, Series};
use madt::pipeline::detect::{evaluate_detection, run_detect};
use madt::pipeline::report::{read_events, write_reports};
use madt::pipeline::synth::{synth_generate, FaultKind, Injection, SynthSpec};
use madt::pipeline::{checkpoint_thresholds, fit, Fitted};
use madt::Error;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(20, 0, 8, 2, 1),
        batch: 8,
        lr: 1e-3,
        max_epochs: 3,
        seed: 2,
        ..Default::default()
    }
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        length: 1400,
        train_length: 1000,
        seed: 11,
        injections: vec![Injection {
            start: 1130,
            duration: 25,
            sensors: vec![1, 5],
            kind: FaultKind::Offset { magnitudes: vec![3.0, -3.0] },
        }],
        ..Default::default()
    }
}

fn fitted() -> (Fitted<f64>, Series, Vec<madt::pipeline::synth::EventTruth>) {
    let spec = small_spec();
    let out = synth_generate(&spec).unwrap();
    let (train, test, events) = out.split(spec.train_length);
    (fit::<f64>(&train, &tiny_cfg(), |_| {}).unwrap(), test, events)
}

#[test]
fn windows_drop_the_remainder() {
    let values = madt::ndgrad::Tensor2::from_vec(250, 2, (0..500).map(f64::from).collect()).unwrap();
    let wins = make_windows::<f64>(&values, 100).unwrap();
    assert_eq!(wins.len(), 2);
    assert_eq!(wins[1].start_index(), 100);
    assert_eq!(wins[1].values().get(0, 1), 201.0);
    assert!(make_windows::<f64>(&values, 251).is_err());
}

#[test]
fn synthetic_series_is_seeded_and_labelled() {
    let spec = SynthSpec::case_study(7);
    let a = synth_generate(&spec).unwrap();
    assert_eq!(a, synth_generate(&spec).unwrap());
    assert_eq!(a.series.sensors.len(), 7);
    let (train, test, events) = a.split(spec.train_length);
    assert!(train.labels.as_ref().unwrap().iter().all(|&l| !l));
    let mut durations: Vec<usize> = events.iter().map(|e| e.duration).collect();
    durations.sort();
    assert_eq!(durations, vec![10, 20, 30, 40, 50, 60]);
    let labels = test.labels.unwrap();
    assert_eq!(labels.iter().filter(|&&l| l).count(), 210);
    for e in &events {
        assert!(labels[e.start..e.start + e.duration].iter().all(|&l| l));
        // Each fault fits inside one window of 100.
        assert_eq!(e.start / 100, (e.start + e.duration - 1) / 100);
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let out = synth_generate(&small_spec()).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &out.series).unwrap();
    assert_eq!(read_csv(buf.as_slice(), true).unwrap(), out.series);
    assert!(read_csv("a,b\n1,x\n".as_bytes(), false).is_err());
    assert!(read_csv("a,b\n1,2\n".as_bytes(), true).is_err());
}

#[test]
fn fit_and_detect_end_to_end() {
    let (fitted, test, events) = fitted();
    let ck = &fitted.checkpoint;
    assert!(fitted.log.epochs.len() <= 3);
    assert!(fitted.log.epochs.last().unwrap().train_loss < fitted.log.initial_loss);
    assert!(matches!(fitted.thresholds.rule, ThresholdRule::BetaMax { .. }));
    assert_eq!(checkpoint_thresholds(ck, None).unwrap(), fitted.thresholds);

    let det = run_detect(ck, &test, &fitted.thresholds, 5, true).unwrap();
    assert_eq!(det.covered, 400);
    assert_eq!(det.point_scores.len(), 400);
    assert_eq!(det.residuals.len(), 20);
    assert!(det.point_scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    for e in &det.events {
        assert!(det.point_flags[e.start..=e.end].iter().any(|&f| f));
        assert_eq!(e.sensor_scores.len(), 7);
    }
    let mut ranks: Vec<usize> = det.events.iter().map(|e| e.severity_rank).collect();
    ranks.sort();
    assert_eq!(ranks, (1..=det.events.len()).collect::<Vec<_>>());
    assert_eq!(det, run_detect(ck, &test, &fitted.thresholds, 5, true).unwrap());

    let summary = evaluate_detection(&det.point_flags, &det.events, test.labels.as_ref().unwrap(), &events).unwrap();
    assert_eq!(summary.events_total, 1);

    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &det).unwrap();
    let back = read_events(dir.path()).unwrap();
    assert_eq!(back.len(), det.events.len());
    for (a, b) in back.iter().zip(&det.events) {
        assert_eq!((a.start, a.end, a.duration_estimate, a.severity_rank), (b.start, b.end, b.duration_estimate, b.severity_rank));
    }

    // Stricter ratio rule refits thresholds from the stored validation scores.
    let strict = checkpoint_thresholds(ck, Some(ThresholdRule::Ratio { r: 0.001 })).unwrap();
    let loose = checkpoint_thresholds(ck, Some(ThresholdRule::Ratio { r: 0.2 })).unwrap();
    assert!(strict.delta_point >= loose.delta_point);
}

#[test]
fn sensor_mismatch_is_a_config_error() {
    let (fitted, test, _) = fitted();
    let keep: Vec<usize> = (0..6).collect();
    let narrow = Series {
        sensors: keep.iter().map(|&j| test.sensors[j].clone()).collect(),
        values: madt::ndgrad::Tensor2::from_vec(
            test.len(),
            6,
            (0..test.len()).flat_map(|t| keep.iter().map(move |&j| (t, j))).map(|(t, j)| test.values.get(t, j)).collect(),
        )
        .unwrap(),
        labels: None,
    };
    let err = run_detect(&fitted.checkpoint, &narrow, &fitted.thresholds, 5, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    // Names are advisory; columns match by position.
    let mut renamed = test.clone();
    renamed.sensors.swap(0, 1);
    let a = run_detect(&fitted.checkpoint, &renamed, &fitted.thresholds, 5, false).unwrap();
    let b = run_detect(&fitted.checkpoint, &test, &fitted.thresholds, 5, false).unwrap();
    assert_eq!(a.point_scores, b.point_scores);
}

#[test]
fn checkpoint_survives_disk_and_resumes_training() {
    let (fitted, test, _) = fitted();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.madt");
    fitted.checkpoint.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back.state.params, fitted.checkpoint.state.params);
    assert_eq!(back.adam.as_ref().unwrap().step, fitted.checkpoint.adam.as_ref().unwrap().step);
    let a = run_detect(&fitted.checkpoint, &test, &fitted.thresholds, 5, false).unwrap();
    let b = run_detect(&back, &test, &checkpoint_thresholds(&back, None).unwrap(), 5, false).unwrap();
    assert_eq!(a.point_scores, b.point_scores);
}

#[test]
fn training_on_too_short_series_fails_cleanly() {
    let out = synth_generate(&SynthSpec {
        length: 15,
        train_length: 15,
        ..small_spec_without_faults()
    })
    .unwrap();
    assert!(fit::<f64>(&out.series, &tiny_cfg(), |_| {}).is_err());
}

fn small_spec_without_faults() -> SynthSpec {
    SynthSpec {
        injections: Vec::new(),
        ..small_spec()
    }
}
