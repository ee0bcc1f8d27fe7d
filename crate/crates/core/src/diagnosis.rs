//! Anomaly scores, sensor localization, duration-based severity,
//! threshold calibration and point-adjusted evaluation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::losses::values as align;
use crate::model::ForwardOutput;
use crate::ndgrad::{Real, Tensor2};
use crate::statemat::{StateMatrixPair, TimeWindow};

/// `Softmax(-v)` with max shift. An empty input gives an empty output.
pub fn softmax_neg(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let m = v.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (-x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Row weights from an alignment vector, uniform when it is absent.
pub fn alignment_weights(alignment: Option<&[f64]>, rows: usize) -> Vec<f64> {
    match alignment {
        Some(a) => softmax_neg(a),
        None => vec![1.0 / rows as f64; rows],
    }
}

/// Per-timestep score: squared reconstruction error of each row times the
/// softmax of the negated series/temporal alignment over the window.
pub fn point_scores<T: Real>(
    x: &Tensor2<T>,
    x_hat: &Tensor2<T>,
    alignment: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim("anomaly_score", x.shape(), x_hat.shape()));
    }
    let weights = alignment_weights(alignment, x.rows());
    if weights.len() != x.rows() {
        return Err(Error::dim("anomaly_score", x.shape(), (weights.len(), 1)));
    }
    Ok((0..x.rows())
        .map(|t| {
            let err: f64 = x
                .row(t)
                .iter()
                .zip(x_hat.row(t))
                .map(|(a, b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            err * weights[t]
        })
        .collect())
}

/// Row sums of the squared residual `(m - m_hat)^2`, each row scaled by the
/// softmax of the negated alignment vector.
pub fn residual_row_scores<T: Real>(
    m: &Tensor2<T>,
    m_hat: &Tensor2<T>,
    alignment: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if m.shape() != m_hat.shape() {
        return Err(Error::dim("residual", m.shape(), m_hat.shape()));
    }
    let weights = alignment_weights(alignment, m.rows());
    if weights.len() != m.rows() {
        return Err(Error::dim("residual", m.shape(), (weights.len(), 1)));
    }
    Ok((0..m.rows())
        .map(|i| {
            let s: f64 = m
                .row(i)
                .iter()
                .zip(m_hat.row(i))
                .map(|(a, b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            s * weights[i]
        })
        .collect())
}

/// Weighted squared residual matrix (for dumps and plotting).
pub fn residual_matrix<T: Real>(
    m: &Tensor2<T>,
    m_hat: &Tensor2<T>,
    alignment: Option<&[f64]>,
) -> Result<Tensor2<f64>> {
    if m.shape() != m_hat.shape() {
        return Err(Error::dim("residual", m.shape(), m_hat.shape()));
    }
    let weights = alignment_weights(alignment, m.rows());
    let mut out = Tensor2::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let d = m.get(i, j).as_f64() - m_hat.get(i, j).as_f64();
            out.set(i, j, d * d * weights[i]);
        }
    }
    Ok(out)
}

/// Point scores of one window from a forward pass.
pub fn anomaly_score<T: Real>(win: &TimeWindow<T>, out: &ForwardOutput<T>) -> Result<Vec<f64>> {
    let a = align::align_seri_temp(&out.maps)?;
    point_scores(win.values(), &out.x_hat, a.as_deref())
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub scores: Vec<f64>,
    /// Sensor indices, most suspicious first.
    pub ranking: Vec<usize>,
}

impl Localization {
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

/// Per-sensor scores from the spatial residual, rows weighted by the
/// softmax of the negated per-sensor spatial/series alignment.
pub fn localize<T: Real>(
    s_m: &Tensor2<T>,
    s_hat: &Tensor2<T>,
    out: &ForwardOutput<T>,
) -> Result<Localization> {
    let a = align::align_seri_space_rowwise(&out.maps)?;
    let scores = residual_row_scores(s_m, s_hat, a.as_deref())?;
    let ranking = rank_desc(&scores);
    Ok(Localization { scores, ranking })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Severity {
    pub row_scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub duration: usize,
}

/// Flags temporal residual rows above `delta_temporal`; the duration
/// estimate is the number of flagged rows.
pub fn severity_from_rows(row_scores: Vec<f64>, delta_temporal: f64) -> Severity {
    let mask: Vec<bool> = row_scores.iter().map(|&s| s > delta_temporal).collect();
    let duration = mask.iter().filter(|&&f| f).count();
    Severity {
        row_scores,
        mask,
        duration,
    }
}

pub fn severity<T: Real>(
    t_m: &Tensor2<T>,
    t_hat: &Tensor2<T>,
    out: &ForwardOutput<T>,
    delta_temporal: f64,
) -> Result<Severity> {
    let a = align::align_seri_temp(&out.maps)?;
    let rows = residual_row_scores(t_m, t_hat, a.as_deref())?;
    Ok(severity_from_rows(rows, delta_temporal))
}

/// How a threshold is derived from validation scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Flag the top fraction `r` of validation scores.
    Ratio { r: f64 },
    /// `beta * max(validation)`; `beta` is searched on `[1, 2]` when
    /// validation labels with anomalies are available.
    BetaMax { beta: f64 },
}

impl ThresholdRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Ratio { r } if !(r > 0.0 && r < 1.0) => {
                Err(Error::Parameter(format!("r must lie in (0, 1), got {r}")))
            }
            ThresholdRule::BetaMax { beta } if !(1.0..=2.0).contains(&beta) => {
                Err(Error::Parameter(format!("beta must lie in [1, 2], got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ThresholdRule::Ratio { .. } => "ratio",
            ThresholdRule::BetaMax { .. } => "betamax",
        }
    }
}

/// Calibrated decision thresholds for the three score streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub rule: ThresholdRule,
    pub delta_point: f64,
    pub delta_sensor: f64,
    pub delta_temporal: f64,
}

/// Grid for the beta search, `1.00, 1.05, ..., 2.00`.
pub fn beta_grid() -> Vec<f64> {
    (0..=20).map(|i| 1.0 + 0.05 * i as f64).collect()
}

/// Threshold of one score stream. Returns the threshold and the rule that
/// was actually applied (with the chosen beta).
pub fn calibrate(
    scores: &[f64],
    rule: ThresholdRule,
    labels: Option<&[bool]>,
) -> Result<(f64, ThresholdRule)> {
    rule.validate()?;
    if scores.is_empty() {
        return Err(Error::Calibration("empty validation score stream".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite validation score".into()));
    }
    match rule {
        ThresholdRule::Ratio { r } => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let n = sorted.len();
            let k = (((1.0 - r) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
            Ok((sorted[k - 1], rule))
        }
        ThresholdRule::BetaMax { beta } => {
            let labels = labels.filter(|l| l.len() == scores.len() && l.iter().any(|&x| x));
            let Some(labels) = labels else {
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                return Ok((beta * max, rule));
            };
            let normal_max = scores
                .iter()
                .zip(labels)
                .filter(|(_, &l)| !l)
                .map(|(&s, _)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            if !normal_max.is_finite() {
                return Err(Error::Calibration(
                    "validation stream has no normal points".into(),
                ));
            }
            let segments = segments_from_labels(labels);
            let mut best = (f64::NEG_INFINITY, 1.0);
            for b in beta_grid() {
                let th = b * normal_max;
                let pred: Vec<bool> = scores.iter().map(|&s| s > th).collect();
                let adj = point_adjust(&pred, &segments)?;
                let f1 = match evaluate(&adj, labels)? {
                    Evaluation::Scored(m) => m.f1,
                    Evaluation::NoAnomaly => 0.0,
                };
                if f1 > best.0 {
                    best = (f1, b);
                }
            }
            Ok((best.1 * normal_max, ThresholdRule::BetaMax { beta: best.1 }))
        }
    }
}

impl Thresholds {
    /// Calibrates all three streams with the same rule. Empty sensor or
    /// temporal streams (disabled branches) yield an infinite threshold.
    pub fn calibrate(
        rule: ThresholdRule,
        point: &[f64],
        point_labels: Option<&[bool]>,
        sensor: &[f64],
        temporal: &[f64],
    ) -> Result<Self> {
        let (delta_point, applied) = calibrate(point, rule, point_labels)?;
        let other = |s: &[f64]| -> Result<f64> {
            if s.is_empty() {
                Ok(f64::INFINITY)
            } else {
                calibrate(s, applied, None).map(|c| c.0)
            }
        };
        Ok(Thresholds {
            rule: applied,
            delta_point,
            delta_sensor: other(sensor)?,
            delta_temporal: other(temporal)?,
        })
    }
}

/// Diagnosis of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub window_start: usize,
    pub point_scores: Vec<f64>,
    pub point_flags: Vec<bool>,
    /// Empty when the spatial branch is disabled.
    pub sensor_scores: Vec<f64>,
    pub sensor_flags: Vec<bool>,
    pub sensor_ranking: Vec<usize>,
    /// Empty when the temporal branch is disabled.
    pub temporal_scores: Vec<f64>,
    pub temporal_flags: Vec<bool>,
    pub duration_estimate: usize,
}

impl AnomalyReport {
    pub fn flagged_sensor_count(&self) -> usize {
        self.sensor_flags.iter().filter(|&&f| f).count()
    }

    /// Larger keys are more severe.
    pub fn severity_rank_key(&self) -> (usize, usize) {
        (self.duration_estimate, self.flagged_sensor_count())
    }
}

/// Raw (unthresholded) score streams of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub point: Vec<f64>,
    pub sensor: Vec<f64>,
    pub temporal: Vec<f64>,
}

pub fn window_scores<T: Real>(
    win: &TimeWindow<T>,
    pair: &StateMatrixPair<T>,
    out: &ForwardOutput<T>,
) -> Result<WindowScores> {
    let st = align::align_seri_temp(&out.maps)?;
    let point = point_scores(win.values(), &out.x_hat, st.as_deref())?;
    let temporal = match &out.t_hat {
        Some(t_hat) => residual_row_scores(&pair.temporal, t_hat, st.as_deref())?,
        None => Vec::new(),
    };
    let sensor = match &out.s_hat {
        Some(s_hat) => {
            let ss = align::align_seri_space_rowwise(&out.maps)?;
            residual_row_scores(&pair.spatial, s_hat, ss.as_deref())?
        }
        None => Vec::new(),
    };
    Ok(WindowScores {
        point,
        sensor,
        temporal,
    })
}

impl WindowScores {
    pub fn report(self, window_start: usize, th: &Thresholds) -> AnomalyReport {
        let point_flags = self.point.iter().map(|&s| s > th.delta_point).collect();
        let sensor_flags = self.sensor.iter().map(|&s| s > th.delta_sensor).collect();
        let sensor_ranking = rank_desc(&self.sensor);
        let sev = severity_from_rows(self.temporal, th.delta_temporal);
        AnomalyReport {
            window_start,
            point_scores: self.point,
            point_flags,
            sensor_scores: self.sensor,
            sensor_flags,
            sensor_ranking,
            temporal_scores: sev.row_scores,
            temporal_flags: sev.mask,
            duration_estimate: sev.duration,
        }
    }
}

/// Inclusive `[start, end]` span of timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Maximal runs of `true`.
pub fn segments_from_labels(labels: &[bool]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Segment { start: s, end: i - 1 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment {
            start: s,
            end: labels.len() - 1,
        });
    }
    out
}

/// Marks every truth segment fully positive if any of its points is
/// predicted positive. Predictions outside segments are kept as they are.
pub fn point_adjust(pred: &[bool], truth: &[Segment]) -> Result<Vec<bool>> {
    let mut sorted = truth.to_vec();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(Error::Input(format!(
                "truth segments {:?} and {:?} overlap",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(s) = sorted.iter().find(|s| s.end >= pred.len() || s.start > s.end) {
        return Err(Error::Input(format!(
            "truth segment {s:?} outside timeline of length {}",
            pred.len()
        )));
    }
    let mut out = pred.to_vec();
    for s in &sorted {
        if pred[s.start..=s.end].iter().any(|&p| p) {
            out[s.start..=s.end].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evaluation {
    Scored(Metrics),
    /// Ground truth has no positive point, so recall is undefined.
    NoAnomaly,
}

impl Evaluation {
    pub fn metrics(&self) -> Option<Metrics> {
        match self {
            Evaluation::Scored(m) => Some(*m),
            Evaluation::NoAnomaly => None,
        }
    }
}

/// Point-wise precision, recall and F1.
pub fn evaluate(pred: &[bool], truth: &[bool]) -> Result<Evaluation> {
    if pred.len() != truth.len() {
        return Err(Error::dim("evaluate", (pred.len(), 1), (truth.len(), 1)));
    }
    if !truth.iter().any(|&t| t) {
        return Ok(Evaluation::NoAnomaly);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Evaluation::Scored(metrics_from_counts(tp, fp, fn_)))
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

/// Fraction of events whose true root-cause set meets the top `k` ranked
/// sensors.
pub fn recall_at_k(rankings: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(Error::dim("recall_at_k", (rankings.len(), 1), (truth.len(), 1)));
    }
    if rankings.is_empty() {
        return Err(Error::Input("recall@k needs at least one event".into()));
    }
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|s| t.contains(s)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}
