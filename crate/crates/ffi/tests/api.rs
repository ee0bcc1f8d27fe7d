use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use madt::model::ModelConfig;
use madt::pipeline::config::TrainConfig;
use madt::pipeline::data::Series;
use madt::pipeline::detect::run_detect;
use madt::pipeline::synth::{synth_generate, FaultKind, Injection, SynthSpec};
use madt::pipeline::{checkpoint_thresholds, fit};
use madt::statemat::{spatial_state_matrix, temporal_state_matrix, TimeWindow};
use madt_ffi::*;

const W: usize = 20;
const N: usize = 7;

/// Trains a tiny model and saves it; returns the checkpoint path and the
/// raw test part.
fn trained(dir: &Path) -> (PathBuf, Series) {
    let spec = SynthSpec {
        length: 1400,
        train_length: 1000,
        seed: 4,
        injections: vec![Injection {
            start: 1210,
            duration: 8,
            sensors: vec![2, 3],
            kind: FaultKind::Offset {
                magnitudes: vec![4.0, -4.0],
            },
        }],
        ..Default::default()
    };
    let (train, test, _) = synth_generate(&spec).unwrap().split(spec.train_length);
    let cfg = TrainConfig {
        model: ModelConfig::tiny(W, 0, 8, 2, 1),
        batch: 8,
        lr: 1e-3,
        max_epochs: 2,
        ..Default::default()
    };
    let fitted = fit::<f32>(&train, &cfg, |_| {}).unwrap();
    let path = dir.join("model.madt");
    fitted.checkpoint.save(&path).unwrap();
    (path, test)
}

fn load(path: &Path) -> *mut MadtModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { madt_model_load(c.as_ptr(), &mut model) }, MadtStatus::Ok);
    assert!(!model.is_null());
    model
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(madt_last_error()) }.to_string_lossy().into_owned()
}

fn window(test: &Series, k: usize) -> Vec<f64> {
    test.values.data()[k * W * N..(k + 1) * W * N].to_vec()
}

#[test]
fn handle_matches_library_detection() {
    let dir = tempfile::tempdir().unwrap();
    let (path, test) = trained(dir.path());
    let model = load(&path);
    let (mut w, mut n) = (0, 0);
    assert_eq!(unsafe { madt_model_shape(model, &mut w, &mut n) }, MadtStatus::Ok);
    assert_eq!((w, n), (W, N));

    let ck = madt::model::Checkpoint::<f32>::load(&path).unwrap();
    let th = checkpoint_thresholds(&ck, None).unwrap();
    let mut deltas = [0.0; 3];
    assert_eq!(unsafe { madt_model_thresholds(model, deltas.as_mut_ptr()) }, MadtStatus::Ok);
    assert_eq!(deltas, [th.delta_point, th.delta_sensor, th.delta_temporal]);

    let det = run_detect(&ck, &test, &th, 0, false).unwrap();
    for k in [0, 10, 19] {
        let x = window(&test, k);
        let (mut point, mut sensor, mut temporal) = (vec![0.0; W], vec![0.0; N], vec![0.0; W]);
        let status = unsafe {
            madt_score_window(model, x.as_ptr(), point.as_mut_ptr(), sensor.as_mut_ptr(), temporal.as_mut_ptr())
        };
        assert_eq!(status, MadtStatus::Ok, "{}", last_error());
        let r = &det.reports[k];
        assert_eq!(point, r.point_scores);
        assert_eq!(sensor, r.sensor_scores);
        assert_eq!(temporal, r.temporal_scores);

        let mut flags = vec![9u8; W];
        let mut ranking = vec![0usize; N];
        let mut summary = MadtWindowSummary::default();
        let status = unsafe {
            madt_detect_window(model, x.as_ptr(), flags.as_mut_ptr(), ranking.as_mut_ptr(), &mut summary)
        };
        assert_eq!(status, MadtStatus::Ok);
        assert_eq!(flags, r.point_flags.iter().map(|&f| f as u8).collect::<Vec<_>>());
        assert_eq!(ranking, r.sensor_ranking);
        assert_eq!(summary.flagged_points, r.point_flags.iter().filter(|&&f| f).count());
        assert_eq!(summary.duration_estimate, r.duration_estimate);
        assert_eq!(summary.flagged_sensors, r.flagged_sensor_count());
        assert_eq!(summary.top_sensor, r.sensor_ranking[0]);
        assert_eq!(last_error(), "");
    }
    unsafe { madt_model_free(model) };
}

#[test]
fn state_matrices_match_library() {
    let x: Vec<f64> = (0..5 * 3).map(|i| (i as f64 * 0.7).cos()).collect();
    let (mut t, mut s) = (vec![0.0; 25], vec![0.0; 9]);
    let status = unsafe { madt_state_matrices(x.as_ptr(), 5, 3, 5.0, 3.0, t.as_mut_ptr(), s.as_mut_ptr()) };
    assert_eq!(status, MadtStatus::Ok);
    let win = TimeWindow::new(madt::ndgrad::Tensor2::from_vec(5, 3, x.clone()).unwrap(), 0).unwrap();
    assert_eq!(t, temporal_state_matrix(&win, 5.0).unwrap().data());
    assert_eq!(s, spatial_state_matrix(&win, 3.0).unwrap().data());
    // Outputs are optional.
    let status = unsafe { madt_state_matrices(x.as_ptr(), 5, 3, 5.0, 3.0, ptr::null_mut(), s.as_mut_ptr()) };
    assert_eq!(status, MadtStatus::Ok);
}

#[test]
fn errors_map_to_codes_and_messages() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/model.madt").unwrap();
    assert_eq!(unsafe { madt_model_load(missing.as_ptr(), &mut model) }, MadtStatus::ErrIo);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/dir/model.madt"));

    assert_eq!(unsafe { madt_model_load(ptr::null(), &mut model) }, MadtStatus::ErrNullPointer);
    assert_eq!(unsafe { madt_model_load(missing.as_ptr(), ptr::null_mut()) }, MadtStatus::ErrNullPointer);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.madt");
    std::fs::write(&junk, b"not a container").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let status = unsafe { madt_model_load(junk.as_ptr(), &mut model) };
    assert!(matches!(status, MadtStatus::ErrCheckpoint | MadtStatus::ErrData), "{status:?}");
    assert!(!last_error().is_empty());

    let x = [1.0; 6];
    let mut s = [0.0; 9];
    assert_eq!(
        unsafe { madt_state_matrices(x.as_ptr(), 2, 3, 0.0, 1.0, ptr::null_mut(), s.as_mut_ptr()) },
        MadtStatus::ErrData
    );
    assert_eq!(
        unsafe { madt_state_matrices(ptr::null(), 2, 3, 1.0, 1.0, ptr::null_mut(), s.as_mut_ptr()) },
        MadtStatus::ErrNullPointer
    );
    assert_eq!(
        unsafe { madt_state_matrices(x.as_ptr(), usize::MAX, 2, 1.0, 1.0, ptr::null_mut(), ptr::null_mut()) },
        MadtStatus::ErrInvalidArgument
    );

    let mut summary = MadtWindowSummary::default();
    let status = unsafe { madt_detect_window(ptr::null(), x.as_ptr(), ptr::null_mut(), ptr::null_mut(), &mut summary) };
    assert_eq!(status, MadtStatus::ErrNullPointer);
    unsafe { madt_model_free(ptr::null_mut()) };
}

#[test]
fn non_finite_window_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, test) = trained(dir.path());
    let model = load(&path);
    let mut x = window(&test, 0);
    x[5] = f64::NAN;
    let mut point = vec![0.0; W];
    let status = unsafe { madt_score_window(model, x.as_ptr(), point.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(status, MadtStatus::ErrInvalidArgument);
    assert!(last_error().contains("non-finite"));
    unsafe { madt_model_free(model) };
}

#[test]
fn header_is_generated_and_usable_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/madt.h")).unwrap();
    for name in ["madt_model_load", "madt_model_free", "madt_score_window", "madt_detect_window", "madt_state_matrices", "madt_last_error", "typedef struct MadtModel MadtModel;"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    // The static library sits next to the test binary's deps directory.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libmadt_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = std::process::Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .expect("C compiler runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (path, _) = trained(dir.path());
    let run = std::process::Command::new(&bin).arg(&path).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8_lossy(&run.stdout);
    assert!(text.starts_with("madt 0.1.0 w=20 n=7 "), "{text}");
}
