//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 usage error, 2 data or configuration error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diagnosis::ThresholdRule;
use crate::error::{Error, Result};
use crate::model::{check_total_loss, Checkpoint, ModelConfig};

use super::config::{KeyValues, TrainConfig};
use super::data::{load_csv, save_csv};
use super::detect::{evaluate_detection, run_detect, truth_from_labels};
use super::report::{self, read_events, read_points, read_truth_events, write_reports, write_truth_events};
use super::synth::{synth_generate, SynthSpec};
use super::{checkpoint_thresholds, fit, threshold_meta};

pub const CHECKPOINT_FILE: &str = "model.madt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Parser, Debug)]
#[command(name = "madt", version, about = "Sensor-series anomaly detection, localization and severity")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "threshold-rule", global = true, value_enum)]
    pub threshold_rule: Option<RuleArg>,
    /// Flagged fraction for the ratio rule
    #[arg(long, global = true)]
    pub r: Option<f64>,
    /// Multiplier in [1, 2] for the betamax rule
    #[arg(long, global = true)]
    pub beta: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleArg {
    Ratio,
    Betamax,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train.csv, test.csv and truth_events.csv from a synthetic spec
    Synth {
        /// Use the six-fault case-study injections
        #[arg(long)]
        case_study: bool,
    },
    /// Train on a CSV and write model.madt and train_log.csv
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from an earlier checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a CSV and write report files
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth events with root-cause sensors
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Metrics of an existing report directory against labels
    Eval {
        /// Directory written by `detect`
        #[arg(long)]
        report: PathBuf,
        /// CSV with a trailing label column
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient on a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
    },
    /// Score traces and residual matrices as CSV for plotting
    Plotdata {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn config_kv(c: &Common) -> Result<KeyValues> {
    match &c.config {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn rule_override(c: &Common, base: Option<ThresholdRule>) -> Result<Option<ThresholdRule>> {
    let rule = match (c.threshold_rule, base) {
        (Some(RuleArg::Ratio), _) => Some(ThresholdRule::Ratio { r: c.r.unwrap_or(0.01) }),
        (Some(RuleArg::Betamax), _) => Some(ThresholdRule::BetaMax { beta: c.beta.unwrap_or(2.0) }),
        (None, Some(ThresholdRule::Ratio { r })) if c.r.is_some() || c.beta.is_some() => {
            Some(ThresholdRule::Ratio { r: c.r.unwrap_or(r) })
        }
        (None, Some(ThresholdRule::BetaMax { beta })) if c.r.is_some() || c.beta.is_some() => {
            Some(ThresholdRule::BetaMax { beta: c.beta.unwrap_or(beta) })
        }
        _ => None,
    };
    if let Some(r) = rule {
        r.validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(rule)
}

/// Rule the checkpoint was calibrated with, so a lone `--r` or `--beta`
/// adjusts it.
fn stored_rule(ck: &Checkpoint<f32>) -> Option<ThresholdRule> {
    checkpoint_thresholds(ck, None).ok().map(|t| t.rule)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth { case_study } => {
            let mut kv = config_kv(c)?;
            if *case_study {
                kv.set("case_study", "true");
            }
            if let Some(s) = c.seed {
                kv.set("seed", s);
            }
            let spec = SynthSpec::from_kv(&kv)?;
            let out = synth_generate(&spec)?;
            let (train, test, events) = out.split(spec.train_length);
            let dir = out_dir(c)?;
            save_csv(&dir.join("train.csv"), &train)?;
            save_csv(&dir.join("test.csv"), &test)?;
            write_truth_events(&dir.join("truth_events.csv"), &events)?;
            println!(
                "wrote {} training and {} test rows with {} events to {}",
                train.len(),
                test.len(),
                events.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Train { data, resume } => {
            let mut kv = config_kv(c)?;
            if let Some(s) = c.seed {
                kv.set("seed", s);
            }
            if let Some(rule) = c.threshold_rule {
                kv.set("threshold_rule", if rule == RuleArg::Ratio { "ratio" } else { "betamax" });
            }
            if let Some(r) = c.r {
                kv.set("r", r);
            }
            if let Some(b) = c.beta {
                kv.set("beta", b);
            }
            let cfg = TrainConfig::from_kv(&kv)?;
            let series = load_csv(data, false)?;
            let dir = out_dir(c)?;
            let fitted = match resume {
                None => fit::<f32>(&series, &cfg, |e| {
                    log::info!(
                        "epoch {} train {:.4} valid {:.4}",
                        e.epoch,
                        e.train_loss,
                        e.valid_loss
                    )
                })?,
                Some(path) => resume_fit(path, &series, &cfg)?,
            };
            fitted.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            write_text(&dir.join(TRAIN_LOG_FILE), &fitted.log.to_text())?;
            for (k, v) in threshold_meta(&fitted.thresholds) {
                println!("{k}: {v}");
            }
            println!("best_epoch: {}", fitted.log.best_epoch);
            Ok(())
        }
        Command::Detect { checkpoint, data, events } => {
            let ck = Checkpoint::<f32>::load(checkpoint)?;
            let th = checkpoint_thresholds(&ck, rule_override(c, stored_rule(&ck))?)?;
            let gap = ck.meta("merge_gap").and_then(|g| g.parse().ok()).unwrap_or(5);
            let series = load_csv(data, false)?;
            let det = run_detect(&ck, &series, &th, gap, true)?;
            let dir = out_dir(c)?;
            write_reports(&dir, &det)?;
            println!("events: {}", det.events.len());
            if let Some(labels) = &series.labels {
                let truth = match events {
                    Some(p) => read_truth_events(p)?,
                    None => truth_from_labels(labels),
                };
                let summary = evaluate_detection(&det.point_flags, &det.events, labels, &truth)?;
                let text = summary.to_text();
                write_text(&dir.join(METRICS_FILE), &text)?;
                print!("{text}");
            }
            Ok(())
        }
        Command::Eval { report, data, events } => {
            let (_, flags) = read_points(&report.join(report::POINTS_FILE))?;
            let detected = read_events(report)?;
            let series = load_csv(data, true)?;
            let labels = series.labels.expect("labels required");
            let truth = match events {
                Some(p) => read_truth_events(p)?,
                None => truth_from_labels(&labels),
            };
            let summary = evaluate_detection(&flags, &detected, &labels, &truth)?;
            print!("{}", summary.to_text());
            Ok(())
        }
        Command::Gradcheck { probes } => {
            let cfg = ModelConfig::tiny(8, 4, 16, 2, 1);
            let seed = c.seed.unwrap_or(0);
            let res = check_total_loss(cfg, 19.0, seed, *probes, 1e-4)?;
            let worst = res.iter().map(|p| p.rel_err).fold(0.0, f64::max);
            let failed = res.iter().filter(|p| !(p.rel_err <= 1e-3)).count();
            println!("probes: {}", res.len());
            println!("max_rel_err: {worst:e}");
            println!("failed: {failed}");
            if failed > 0 {
                return Err(Error::Numeric {
                    op: "gradcheck",
                    detail: format!("{failed} probes exceed relative error 1e-3"),
                });
            }
            Ok(())
        }
        Command::Plotdata { checkpoint, data } => {
            let ck = Checkpoint::<f32>::load(checkpoint)?;
            let th = checkpoint_thresholds(&ck, rule_override(c, stored_rule(&ck))?)?;
            let gap = ck.meta("merge_gap").and_then(|g| g.parse().ok()).unwrap_or(5);
            let series = load_csv(data, false)?;
            let det = run_detect(&ck, &series, &th, gap, true)?;
            let dir = out_dir(c)?;
            write_plotdata(&dir, &det, series.labels.as_deref())?;
            println!("wrote plot data for {} windows to {}", det.residuals.len(), dir.display());
            Ok(())
        }
    }
}

fn resume_fit(path: &Path, series: &super::data::Series, cfg: &TrainConfig) -> Result<super::Fitted<f32>> {
    use super::data::{make_windows, Normalizer};
    use super::train::{prepare, train};
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.state.config.n != series.sensors.len() {
        return Err(Error::Config(format!(
            "series has {} sensors, checkpoint expects {}",
            series.sensors.len(),
            ck.state.config.n
        )));
    }
    let (clean, _) = series.drop_labeled();
    let (tr, va) = clean.split_tail(cfg.valid_fraction)?;
    let norm = Normalizer {
        mean: ck.norm_mean.clone(),
        std: ck.norm_std.clone(),
    };
    let w = ck.state.config.w;
    let train_set = prepare(make_windows::<f32>(&norm.apply(&tr.values)?, w)?, ck.tau_t, ck.tau_s)?;
    let valid_set = if va.len() >= w {
        prepare(make_windows::<f32>(&norm.apply(&va.values)?, w)?, ck.tau_t, ck.tau_s)?
    } else {
        Vec::new()
    };
    let outcome = train(ck.state.clone(), ck.adam.clone(), &train_set, &valid_set, cfg, |_| {})?;
    let calib = if valid_set.is_empty() { &train_set } else { &valid_set };
    let streams = super::score_streams(&outcome.state, calib)?;
    let thresholds = super::calibrate_streams(&streams, cfg.rule)?;
    let mut extra_meta: Vec<(String, String)> = ck
        .extra_meta
        .iter()
        .filter(|(k, _)| !threshold_meta(&thresholds).iter().any(|(t, _)| t == k))
        .cloned()
        .collect();
    extra_meta.extend(threshold_meta(&thresholds));
    let row = |v: &[f64]| crate::ndgrad::Tensor2::from_vec(1, v.len(), v.to_vec());
    let checkpoint = Checkpoint {
        state: outcome.state,
        adam: Some(outcome.adam),
        extra_meta,
        extra_tensors: vec![
            ("valid_point".to_string(), row(&streams.point)?),
            ("valid_sensor".to_string(), row(&streams.sensor)?),
            ("valid_temporal".to_string(), row(&streams.temporal)?),
        ],
        ..ck
    };
    Ok(super::Fitted {
        checkpoint,
        log: outcome.log,
        thresholds,
    })
}

/// `score_trace.csv` plus one temporal and one spatial residual CSV per
/// window that contains a detected event.
pub fn write_plotdata(dir: &Path, det: &super::detect::Detection, labels: Option<&[bool]>) -> Result<()> {
    let path = dir.join("score_trace.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Input(e.to_string()))?;
    let io = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    w.write_record([
        "timestep",
        "score",
        "threshold",
        "flag",
        "temporal_score",
        "temporal_threshold",
        "temporal_flag",
        "label",
    ])
        .map_err(io)?;
    for t in 0..det.covered {
        let label = labels.map_or(String::new(), |l| (l[t] as u8).to_string());
        w.write_record([
            t.to_string(),
            det.point_scores[t].to_string(),
            det.thresholds.delta_point.to_string(),
            (det.point_flags[t] as u8).to_string(),
            det.temporal_scores.get(t).map_or(String::new(), f64::to_string),
            det.thresholds.delta_temporal.to_string(),
            (det.temporal_flags[t] as u8).to_string(),
            label,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let windows: std::collections::BTreeSet<usize> = det
        .events
        .iter()
        .flat_map(|e| e.start / det.window..=e.end / det.window)
        .collect();
    for k in windows {
        let r = &det.residuals[k];
        for (tag, m) in [("temporal", &r.temporal), ("spatial", &r.spatial)] {
            let Some(m) = m else { continue };
            let path = dir.join(format!("{tag}_residual_{}.csv", r.start));
            let text: String = (0..m.rows())
                .map(|i| {
                    let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
                    row.join(",") + "\n"
                })
                .collect();
            write_text(&path, &text)?;
        }
    }
    Ok(())
}
