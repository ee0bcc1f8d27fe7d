//! Coupled two-tank process simulator with fault injection.
//!
//! Tank 1 is filled by a pump and drains into tank 2 through a valve; tank 2
//! drains to the sump. Flows follow Torricelli's law, the pump command
//! cycles with two periodic terms plus a slow random disturbance, and every
//! sensor reading carries Gaussian measurement noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor2;

use super::config::KeyValues;
use super::data::Series;

pub const SENSORS: [&str; 7] = [
    "level_1",
    "level_2",
    "flow_in",
    "flow_12",
    "flow_out",
    "pressure_1",
    "pump_cmd",
];

/// Base measurement noise per sensor, scaled by [`SynthSpec::noise`].
const NOISE: [f64; 7] = [0.01, 0.01, 0.002, 0.002, 0.002, 0.1, 0.005];

#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    /// Adds `magnitudes[k]` clean-signal standard deviations to the `k`-th
    /// affected sensor. A single magnitude applies to every sensor.
    Offset { magnitudes: Vec<f64> },
    /// Reading freezes at its value on the first faulty step.
    Stuck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub start: usize,
    pub duration: usize,
    pub sensors: Vec<usize>,
    pub kind: FaultKind,
}

impl Injection {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    /// Rows before this index form the training file, the rest the test file.
    pub train_length: usize,
    pub seed: u64,
    pub noise: f64,
    pub dt: f64,
    pub pump_gain: f64,
    pub valve_12: f64,
    pub valve_out: f64,
    pub periods: (f64, f64),
    pub injections: Vec<Injection>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            length: 35_000,
            train_length: 30_000,
            seed: 7,
            noise: 1.0,
            dt: 1.0,
            pump_gain: 0.2,
            valve_12: 0.15,
            valve_out: 0.12,
            periods: (200.0, 50.0),
            injections: Vec::new(),
        }
    }
}

/// Start offsets (relative to the test part) and parameters of the six
/// case-study faults. Each fault sits inside one 100-step window.
const CASE_STUDY: [(usize, usize, [usize; 2], [f64; 2]); 6] = [
    (420, 30, [0, 3], [2.5, -2.0]),
    (1230, 10, [1, 4], [-2.5, 2.0]),
    (2020, 50, [2, 6], [2.5, -2.0]),
    (2830, 20, [5, 1], [-2.5, 2.0]),
    (3620, 60, [3, 2], [2.5, -2.0]),
    (4420, 40, [0, 6], [-2.5, 2.0]),
];

impl SynthSpec {
    /// Six offset faults lasting 10 to 60 steps, all in the test part. Each
    /// pushes one sensor up and another down; the sign pattern alternates
    /// between events.
    pub fn case_study(seed: u64) -> Self {
        let base = SynthSpec {
            seed,
            ..Default::default()
        };
        let injections = CASE_STUDY
            .iter()
            .map(|&(start, duration, sensors, magnitude)| Injection {
                start: base.train_length + start,
                duration,
                sensors: sensors.to_vec(),
                kind: FaultKind::Offset {
                    magnitudes: magnitude.to_vec(),
                },
            })
            .collect();
        SynthSpec { injections, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.train_length > self.length {
            return Err(Error::Config(format!(
                "need 2 <= length and train_length <= length, got {} and {}",
                self.length, self.train_length
            )));
        }
        if !(self.noise >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("noise must be >= 0 and dt > 0".into()));
        }
        let mut spans: Vec<&Injection> = self.injections.iter().collect();
        spans.sort_by_key(|i| i.start);
        for inj in &spans {
            if inj.duration == 0 || inj.end() > self.length {
                return Err(Error::Config(format!(
                    "injection at {} with duration {} is out of bounds",
                    inj.start, inj.duration
                )));
            }
            if let FaultKind::Offset { magnitudes } = &inj.kind {
                if magnitudes.len() != 1 && magnitudes.len() != inj.sensors.len() {
                    return Err(Error::Config(format!(
                        "injection at {} needs one magnitude or one per sensor",
                        inj.start
                    )));
                }
            }
            if inj.sensors.is_empty() || inj.sensors.iter().any(|&s| s >= SENSORS.len()) {
                return Err(Error::Config(format!(
                    "injection at {} has invalid sensors {:?}",
                    inj.start, inj.sensors
                )));
            }
        }
        for pair in spans.windows(2) {
            if pair[0].end() > pair[1].start {
                return Err(Error::Config(format!(
                    "injections at {} and {} overlap",
                    pair[0].start, pair[1].start
                )));
            }
        }
        Ok(())
    }

    /// Reads `key = value` lines. `inject = start,duration,s1:s2,kind[,m1:m2]`
    /// may repeat; `kind` is `offset` or `stuck`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut spec = SynthSpec::default();
        if kv.get("case_study").map(|v| v == "true").unwrap_or(false) {
            spec = SynthSpec::case_study(spec.seed);
        }
        for (key, value) in kv.entries() {
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
            };
            match key {
                "length" => spec.length = int(value)?,
                "train_length" => spec.train_length = int(value)?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("seed: bad value {value:?}")))?
                }
                "noise" => spec.noise = num(value)?,
                "dt" => spec.dt = num(value)?,
                "pump_gain" => spec.pump_gain = num(value)?,
                "valve_12" => spec.valve_12 = num(value)?,
                "valve_out" => spec.valve_out = num(value)?,
                "period_1" => spec.periods.0 = num(value)?,
                "period_2" => spec.periods.1 = num(value)?,
                "case_study" => {}
                "inject" => spec.injections.push(parse_injection(value)?),
                other => return Err(Error::Config(format!("unknown synth key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_injection(v: &str) -> Result<Injection> {
    let bad = || Error::Config(format!("inject: malformed value {v:?}"));
    let f: Vec<&str> = v.split(',').map(str::trim).collect();
    if f.len() < 4 {
        return Err(bad());
    }
    let start = f[0].parse().map_err(|_| bad())?;
    let duration = f[1].parse().map_err(|_| bad())?;
    let sensors = f[2]
        .split(':')
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    let kind = match (f[3], f.get(4)) {
        ("offset", Some(m)) => FaultKind::Offset {
            magnitudes: m
                .split(':')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        },
        ("stuck", None) => FaultKind::Stuck,
        _ => return Err(bad()),
    };
    Ok(Injection {
        start,
        duration,
        sensors,
        kind,
    })
}

/// Ground truth for one injected fault.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTruth {
    pub start: usize,
    pub duration: usize,
    pub sensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Full labeled series.
    pub series: Series,
    pub events: Vec<EventTruth>,
}

impl SynthOutput {
    /// Training rows and test rows; event starts are rebased to the test part.
    pub fn split(&self, train_length: usize) -> (Series, Series, Vec<EventTruth>) {
        let train = self.series.slice(0, train_length);
        let test = self.series.slice(train_length, self.series.len());
        let events = self
            .events
            .iter()
            .filter(|e| e.start >= train_length)
            .map(|e| EventTruth {
                start: e.start - train_length,
                ..e.clone()
            })
            .collect();
        (train, test, events)
    }
}

/// Simulates the clean process, then applies the injections.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = SENSORS.len();
    let mut clean = vec![0.0; spec.length * n];

    let (mut h1, mut h2) = (1.4_f64, 0.85_f64);
    let mut disturbance = 0.0_f64;
    let tau = std::f64::consts::TAU;
    // settle the tanks before recording
    let burn_in = 500;
    for t in 0..burn_in + spec.length {
        let tt = t as f64 * spec.dt;
        disturbance = 0.95 * disturbance + 0.005 * unit.sample(&mut rng);
        let u = (0.55
            + 0.15 * (tau * tt / spec.periods.0).sin()
            + 0.06 * (tau * tt / spec.periods.1 + 0.7).sin()
            + disturbance)
            .clamp(0.0, 1.0);
        let q_in = spec.pump_gain * u;
        let q_12 = spec.valve_12 * (h1 - h2).max(0.0).sqrt();
        let q_out = spec.valve_out * h2.max(0.0).sqrt();
        h1 = (h1 + spec.dt * (q_in - q_12)).max(0.0);
        h2 = (h2 + spec.dt * (q_12 - q_out)).max(0.0);
        if t >= burn_in {
            let row = &mut clean[(t - burn_in) * n..(t - burn_in + 1) * n];
            row.copy_from_slice(&[h1, h2, q_in, q_12, q_out, 9.81 * h1 + 1.0, u]);
        }
    }

    let std = column_std(&clean, n);
    let mut values = clean;
    for (i, v) in values.iter_mut().enumerate() {
        *v += spec.noise * NOISE[i % n] * unit.sample(&mut rng);
    }

    let mut labels = vec![false; spec.length];
    let mut events = Vec::with_capacity(spec.injections.len());
    for inj in &spec.injections {
        for (k, &s) in inj.sensors.iter().enumerate() {
            let frozen = values[inj.start * n + s];
            for t in inj.start..inj.end() {
                let v = &mut values[t * n + s];
                match &inj.kind {
                    FaultKind::Offset { magnitudes } => {
                        *v += magnitudes[k.min(magnitudes.len() - 1)] * std[s]
                    }
                    FaultKind::Stuck => *v = frozen,
                }
            }
        }
        labels[inj.start..inj.end()].iter_mut().for_each(|l| *l = true);
        events.push(EventTruth {
            start: inj.start,
            duration: inj.duration,
            sensors: inj.sensors.clone(),
        });
    }
    events.sort_by_key(|e| e.start);

    Ok(SynthOutput {
        series: Series {
            sensors: SENSORS.iter().map(|s| s.to_string()).collect(),
            values: Tensor2::from_vec(spec.length, n, values)?,
            labels: Some(labels),
        },
        events,
    })
}

fn column_std(data: &[f64], n: usize) -> Vec<f64> {
    let rows = (data.len() / n) as f64;
    (0..n)
        .map(|j| {
            let mean = data.iter().skip(j).step_by(n).sum::<f64>() / rows;
            let var = data
                .iter()
                .skip(j)
                .step_by(n)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / rows;
            var.sqrt().max(1e-9)
        })
        .collect()
}
