//! Window-by-window detection stitched onto the input timeline.

use crate::diagnosis::{
    evaluate, point_adjust, rank_desc, recall_at_k, residual_matrix, segments_from_labels, window_scores,
    AnomalyReport, Evaluation, Thresholds,
};
use crate::error::{Error, Result};
use crate::losses::values as align;
use crate::model::Checkpoint;
use crate::ndgrad::{Real, Tensor2};
use crate::statemat::StateMatrixPair;

use super::data::{make_windows, Normalizer, Series};
use super::synth::EventTruth;

/// Weighted squared residuals of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResidual {
    pub start: usize,
    pub temporal: Option<Tensor2<f64>>,
    pub spatial: Option<Tensor2<f64>>,
}

/// A run of flagged timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedEvent {
    pub id: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub duration_estimate: usize,
    pub flagged_sensors: Vec<usize>,
    /// Sensor scores summed over the windows the event touches.
    pub sensor_scores: Vec<f64>,
    pub ranking: Vec<usize>,
    /// 1 is the most severe.
    pub severity_rank: usize,
}

impl DetectedEvent {
    pub fn severity_key(&self) -> (usize, usize) {
        (self.duration_estimate, self.flagged_sensors.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sensors: Vec<String>,
    pub window: usize,
    pub reports: Vec<AnomalyReport>,
    /// Timesteps covered by whole windows.
    pub covered: usize,
    pub point_scores: Vec<f64>,
    pub point_flags: Vec<bool>,
    /// Empty when the temporal branch is disabled.
    pub temporal_scores: Vec<f64>,
    /// All false when the temporal branch is disabled.
    pub temporal_flags: Vec<bool>,
    pub events: Vec<DetectedEvent>,
    pub residuals: Vec<WindowResidual>,
    pub thresholds: Thresholds,
}

/// Scores every whole window of `series` with a trained checkpoint.
pub fn run_detect<T: Real>(
    ck: &Checkpoint<T>,
    series: &Series,
    th: &Thresholds,
    merge_gap: usize,
    keep_residuals: bool,
) -> Result<Detection> {
    let cfg = ck.state.config;
    if series.sensors.len() != cfg.n {
        return Err(Error::Config(format!(
            "series has {} sensors, checkpoint expects {}",
            series.sensors.len(),
            cfg.n
        )));
    }
    if series.sensors != ck.sensors {
        log::warn!("sensor names differ from the checkpoint; matching by position");
    }
    let norm = Normalizer {
        mean: ck.norm_mean.clone(),
        std: ck.norm_std.clone(),
    };
    let z = norm.apply(&series.values)?;
    let windows = make_windows::<T>(&z, cfg.w)?;
    let mut reports = Vec::with_capacity(windows.len());
    let mut residuals = Vec::new();
    for win in &windows {
        let pair = StateMatrixPair::build(win, ck.tau_t, ck.tau_s)?;
        let out = ck.state.forward(win, &pair)?;
        let scores = window_scores(win, &pair, &out)?;
        if keep_residuals {
            let st = align::align_seri_temp(&out.maps)?;
            let ss = align::align_seri_space_rowwise(&out.maps)?;
            residuals.push(WindowResidual {
                start: win.start_index(),
                temporal: out
                    .t_hat
                    .as_ref()
                    .map(|h| residual_matrix(&pair.temporal, h, st.as_deref()))
                    .transpose()?,
                spatial: out
                    .s_hat
                    .as_ref()
                    .map(|h| residual_matrix(&pair.spatial, h, ss.as_deref()))
                    .transpose()?,
            });
        }
        reports.push(scores.report(win.start_index(), th));
    }
    let covered = windows.len() * cfg.w;
    let mut point_scores = Vec::with_capacity(covered);
    let mut point_flags = Vec::with_capacity(covered);
    let mut temporal_flags = Vec::with_capacity(covered);
    let mut temporal_scores = Vec::new();
    for r in &reports {
        temporal_scores.extend_from_slice(&r.temporal_scores);
        point_scores.extend_from_slice(&r.point_scores);
        point_flags.extend_from_slice(&r.point_flags);
        if r.temporal_flags.is_empty() {
            temporal_flags.extend(std::iter::repeat(false).take(cfg.w));
        } else {
            temporal_flags.extend_from_slice(&r.temporal_flags);
        }
    }
    let events = extract_events(&reports, &point_flags, &temporal_flags, cfg.w, cfg.temporal, merge_gap);
    Ok(Detection {
        sensors: series.sensors.clone(),
        window: cfg.w,
        reports,
        covered,
        point_scores,
        point_flags,
        temporal_scores,
        temporal_flags,
        events,
        residuals,
        thresholds: *th,
    })
}

/// Runs of point or temporal flags, merged across gaps of at most
/// `merge_gap` unflagged steps. Only runs holding at least one point flag
/// become events; temporal flags widen an event but never start one.
pub fn extract_events(
    reports: &[AnomalyReport],
    point_flags: &[bool],
    temporal_flags: &[bool],
    w: usize,
    temporal: bool,
    merge_gap: usize,
) -> Vec<DetectedEvent> {
    let mask: Vec<bool> = point_flags
        .iter()
        .zip(temporal_flags)
        .map(|(&p, &t)| p || t)
        .collect();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for seg in segments_from_labels(&mask) {
        match spans.last_mut() {
            Some(last) if seg.start - last.1 - 1 <= merge_gap => last.1 = seg.end,
            _ => spans.push((seg.start, seg.end)),
        }
    }
    spans.retain(|&(start, end)| point_flags[start..=end].iter().any(|&f| f));
    let n = reports
        .iter()
        .map(|r| r.sensor_scores.len())
        .max()
        .unwrap_or(0);
    let mut events: Vec<DetectedEvent> = spans
        .into_iter()
        .enumerate()
        .map(|(id, (start, end))| {
            let duration_estimate = if temporal {
                temporal_flags[start..=end].iter().filter(|&&f| f).count()
            } else {
                point_flags[start..=end].iter().filter(|&&f| f).count()
            };
            let mut sensor_scores = vec![0.0; n];
            let mut flagged = vec![false; n];
            for r in &reports[start / w..=end / w] {
                for (j, s) in r.sensor_scores.iter().enumerate() {
                    sensor_scores[j] += s;
                    flagged[j] |= r.sensor_flags[j];
                }
            }
            DetectedEvent {
                id: id + 1,
                start,
                end,
                duration_estimate,
                flagged_sensors: (0..n).filter(|&j| flagged[j]).collect(),
                ranking: rank_desc(&sensor_scores),
                sensor_scores,
                severity_rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        events[b]
            .severity_key()
            .cmp(&events[a].severity_key())
            .then(events[a].start.cmp(&events[b].start))
    });
    for (rank, &i) in order.iter().enumerate() {
        events[i].severity_rank = rank + 1;
    }
    events
}

/// Detection quality against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub evaluation: Evaluation,
    pub events_total: usize,
    pub events_detected: usize,
    /// Only with root-cause sensor sets.
    pub recall_at_3: Option<f64>,
    pub mean_duration_abs_err: Option<f64>,
    /// For each true event, the index of the best-overlapping detected event.
    pub matches: Vec<Option<usize>>,
}

/// True events from labels when no explicit list is given.
pub fn truth_from_labels(labels: &[bool]) -> Vec<EventTruth> {
    segments_from_labels(labels)
        .into_iter()
        .map(|s| EventTruth {
            start: s.start,
            duration: s.len(),
            sensors: Vec::new(),
        })
        .collect()
}

/// Point-adjusted metrics over the covered prefix plus event-level
/// matching. Timesteps are relative to the start of the scored series.
pub fn evaluate_detection(
    point_flags: &[bool],
    events: &[DetectedEvent],
    labels: &[bool],
    truth: &[EventTruth],
) -> Result<EvalSummary> {
    let covered = point_flags.len();
    if labels.len() < covered {
        return Err(Error::Input(format!(
            "{} labels for {covered} scored timesteps",
            labels.len()
        )));
    }
    let labels = &labels[..covered];
    let adjusted = point_adjust(point_flags, &segments_from_labels(labels))?;
    let evaluation = evaluate(&adjusted, labels)?;
    let truth: Vec<&EventTruth> = truth
        .iter()
        .filter(|t| t.start + t.duration <= covered)
        .collect();
    let matches: Vec<Option<usize>> = truth
        .iter()
        .map(|t| {
            let (a, b) = (t.start, t.start + t.duration - 1);
            events
                .iter()
                .enumerate()
                .map(|(i, e)| (i, e.end.min(b) as i64 - e.start.max(a) as i64 + 1))
                .filter(|&(_, overlap)| overlap > 0)
                .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
                .map(|(i, _)| i)
        })
        .collect();
    let events_detected = matches.iter().flatten().count();
    let recall_at_3 = if !truth.is_empty() && truth.iter().all(|t| !t.sensors.is_empty()) {
        let rankings: Vec<Vec<usize>> = matches
            .iter()
            .map(|m| m.map(|i| events[i].ranking.clone()).unwrap_or_default())
            .collect();
        let sets: Vec<Vec<usize>> = truth.iter().map(|t| t.sensors.clone()).collect();
        Some(recall_at_k(&rankings, &sets, 3)?)
    } else {
        None
    };
    let errs: Vec<f64> = truth
        .iter()
        .zip(&matches)
        .filter_map(|(t, m)| m.map(|i| (events[i].duration_estimate as f64 - t.duration as f64).abs()))
        .collect();
    let mean_duration_abs_err = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
    Ok(EvalSummary {
        evaluation,
        events_total: truth.len(),
        events_detected,
        recall_at_3,
        mean_duration_abs_err,
        matches,
    })
}

impl EvalSummary {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
        let mut s = String::new();
        match self.evaluation {
            Evaluation::Scored(m) => {
                s.push_str(&format!("precision: {}\n", m.precision));
                s.push_str(&format!("recall: {}\n", m.recall));
                s.push_str(&format!("f1: {}\n", m.f1));
            }
            Evaluation::NoAnomaly => {
                s.push_str("status: no-anomaly\n");
                s.push_str("precision: n/a\nrecall: n/a\nf1: n/a\n");
            }
        }
        s.push_str(&format!("recall_at_3: {}\n", opt(self.recall_at_3)));
        s.push_str(&format!("events_detected: {}\n", self.events_detected));
        s.push_str(&format!("events_total: {}\n", self.events_total));
        s.push_str(&format!("mean_duration_abs_err: {}\n", opt(self.mean_duration_abs_err)));
        s
    }
}
