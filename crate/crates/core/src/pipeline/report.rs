//! Report files.
//!
//! - `points.csv`: `timestep,score,flag`
//! - `sensors.csv`: `sensor,score,flag,rank` summed over all detected events
//!   (over every window when nothing was detected)
//! - `event_sensors.csv`: `event,sensor,score,flag,rank`
//! - `events.csv`: `event_id,start,end,duration_estimate,flagged_sensor_count,severity_rank`
//! - `residuals.madt`: weighted residual matrices per window (container format)
//!
//! Timesteps are row indices of the scored input file.

use std::path::Path;

use crate::container::Container;
use crate::diagnosis::rank_desc;
use crate::error::{Error, Result};

use super::detect::{DetectedEvent, Detection};
use super::synth::EventTruth;

pub const POINTS_FILE: &str = "points.csv";
pub const SENSORS_FILE: &str = "sensors.csv";
pub const EVENT_SENSORS_FILE: &str = "event_sensors.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const RESIDUALS_FILE: &str = "residuals.madt";
pub const RESIDUALS_KIND: &str = "residuals";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::Parse {
            line: 1,
            detail: format!("{}: expected columns {header:?}, found {found:?}", path.display()),
        });
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            Ok((line, rec.iter().map(str::to_string).collect()))
        })
        .collect()
}

fn field<V: std::str::FromStr>(line: usize, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Parse {
        line,
        detail: format!("cannot parse {v:?}"),
    })
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Writes every report file of a detection run into `dir`.
pub fn write_reports(dir: &Path, det: &Detection) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_points(&dir.join(POINTS_FILE), &det.point_scores, &det.point_flags)?;
    let (scores, flags) = run_sensor_summary(det);
    write_sensors(&dir.join(SENSORS_FILE), &det.sensors, &scores, &flags)?;
    write_event_sensors(&dir.join(EVENT_SENSORS_FILE), &det.sensors, &det.events)?;
    write_events(&dir.join(EVENTS_FILE), &det.events)?;
    if !det.residuals.is_empty() {
        residual_container(det).write(&dir.join(RESIDUALS_FILE))?;
    }
    Ok(())
}

/// Sensor scores summed over detected events, or over all windows when
/// there are none; a sensor is flagged if any contributing window flagged it.
pub fn run_sensor_summary(det: &Detection) -> (Vec<f64>, Vec<bool>) {
    let n = det.sensors.len();
    let mut scores = vec![0.0; n];
    let mut flags = vec![false; n];
    if det.events.is_empty() {
        for r in &det.reports {
            for (j, s) in r.sensor_scores.iter().enumerate() {
                scores[j] += s;
                flags[j] |= r.sensor_flags[j];
            }
        }
    } else {
        for e in &det.events {
            for (j, s) in e.sensor_scores.iter().enumerate() {
                scores[j] += s;
            }
            for &j in &e.flagged_sensors {
                flags[j] = true;
            }
        }
    }
    (scores, flags)
}

pub fn write_points(path: &Path, scores: &[f64], flags: &[bool]) -> Result<()> {
    write_rows(
        path,
        &["timestep", "score", "flag"],
        scores
            .iter()
            .zip(flags)
            .enumerate()
            .map(|(t, (s, &f))| vec![t.to_string(), s.to_string(), flag(f)]),
    )
}

pub fn read_points(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for (line, r) in read_rows(path, &["timestep", "score", "flag"])? {
        let t: usize = field(line, &r[0])?;
        if t != scores.len() {
            return Err(Error::Parse {
                line,
                detail: format!("timestep {t} out of sequence"),
            });
        }
        scores.push(field(line, &r[1])?);
        flags.push(field::<u8>(line, &r[2])? == 1);
    }
    Ok((scores, flags))
}

pub fn write_sensors(path: &Path, names: &[String], scores: &[f64], flags: &[bool]) -> Result<()> {
    let ranking = rank_desc(scores);
    let mut rank = vec![0; scores.len()];
    for (r, &j) in ranking.iter().enumerate() {
        rank[j] = r + 1;
    }
    write_rows(
        path,
        &["sensor", "score", "flag", "rank"],
        (0..scores.len()).map(|j| {
            vec![
                names[j].clone(),
                scores[j].to_string(),
                flag(flags[j]),
                rank[j].to_string(),
            ]
        }),
    )
}

pub fn write_event_sensors(path: &Path, names: &[String], events: &[DetectedEvent]) -> Result<()> {
    let mut rows = Vec::new();
    for e in events {
        let mut rank = vec![0; e.sensor_scores.len()];
        for (r, &j) in e.ranking.iter().enumerate() {
            rank[j] = r + 1;
        }
        for j in 0..e.sensor_scores.len() {
            rows.push(vec![
                e.id.to_string(),
                names[j].clone(),
                e.sensor_scores[j].to_string(),
                flag(e.flagged_sensors.contains(&j)),
                rank[j].to_string(),
            ]);
        }
    }
    write_rows(path, &["event", "sensor", "score", "flag", "rank"], rows)
}

pub const EVENT_COLUMNS: [&str; 6] = [
    "event_id",
    "start",
    "end",
    "duration_estimate",
    "flagged_sensor_count",
    "severity_rank",
];

pub fn write_events(path: &Path, events: &[DetectedEvent]) -> Result<()> {
    write_rows(
        path,
        &EVENT_COLUMNS,
        events.iter().map(|e| {
            vec![
                e.id.to_string(),
                e.start.to_string(),
                e.end.to_string(),
                e.duration_estimate.to_string(),
                e.flagged_sensors.len().to_string(),
                e.severity_rank.to_string(),
            ]
        }),
    )
}

/// Reads `events.csv` and, when present, `event_sensors.csv` from `dir`.
/// Sensor flags are not recoverable from the summary columns alone, so
/// `flagged_sensors` is filled from the per-event file.
pub fn read_events(dir: &Path) -> Result<Vec<DetectedEvent>> {
    let mut events = Vec::new();
    for (line, r) in read_rows(&dir.join(EVENTS_FILE), &EVENT_COLUMNS)? {
        events.push(DetectedEvent {
            id: field(line, &r[0])?,
            start: field(line, &r[1])?,
            end: field(line, &r[2])?,
            duration_estimate: field(line, &r[3])?,
            flagged_sensors: Vec::new(),
            sensor_scores: Vec::new(),
            ranking: Vec::new(),
            severity_rank: field(line, &r[5])?,
        });
    }
    let per_event = dir.join(EVENT_SENSORS_FILE);
    if per_event.exists() {
        let mut ranks: Vec<Vec<(usize, usize)>> = vec![Vec::new(); events.len()];
        for (line, r) in read_rows(&per_event, &["event", "sensor", "score", "flag", "rank"])? {
            let id: usize = field(line, &r[0])?;
            let idx = events.iter().position(|e| e.id == id).ok_or_else(|| Error::Parse {
                line,
                detail: format!("unknown event {id}"),
            })?;
            let j = events[idx].sensor_scores.len();
            events[idx].sensor_scores.push(field(line, &r[2])?);
            if field::<u8>(line, &r[3])? == 1 {
                events[idx].flagged_sensors.push(j);
            }
            ranks[idx].push((field(line, &r[4])?, j));
        }
        for (e, mut r) in events.iter_mut().zip(ranks) {
            r.sort();
            e.ranking = r.into_iter().map(|(_, j)| j).collect();
        }
    }
    Ok(events)
}

pub fn write_truth_events(path: &Path, events: &[EventTruth]) -> Result<()> {
    write_rows(
        path,
        &["event_id", "start", "duration", "sensors"],
        events.iter().enumerate().map(|(i, e)| {
            vec![
                (i + 1).to_string(),
                e.start.to_string(),
                e.duration.to_string(),
                e.sensors
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            ]
        }),
    )
}

pub fn read_truth_events(path: &Path) -> Result<Vec<EventTruth>> {
    read_rows(path, &["event_id", "start", "duration", "sensors"])?
        .into_iter()
        .map(|(line, r)| {
            let sensors = if r[3].is_empty() {
                Vec::new()
            } else {
                r[3].split(';').map(|s| field(line, s)).collect::<Result<_>>()?
            };
            Ok(EventTruth {
                start: field(line, &r[1])?,
                duration: field(line, &r[2])?,
                sensors,
            })
        })
        .collect()
}

/// Residual matrices and score traces of every window.
pub fn residual_container(det: &Detection) -> Container {
    let mut c = Container::new(RESIDUALS_KIND);
    c.set_meta("window", det.window);
    c.set_meta("windows", det.residuals.len());
    c.set_meta("sensors", det.sensors.join(","));
    c.set_meta("delta_point", det.thresholds.delta_point);
    c.set_meta("delta_sensor", det.thresholds.delta_sensor);
    c.set_meta("delta_temporal", det.thresholds.delta_temporal);
    for (k, r) in det.residuals.iter().enumerate() {
        c.set_meta(&format!("start.{k}"), r.start);
        if let Some(t) = &r.temporal {
            c.push_tensor(&format!("temporal.{k}"), t);
        }
        if let Some(s) = &r.spatial {
            c.push_tensor(&format!("spatial.{k}"), s);
        }
    }
    c
}
