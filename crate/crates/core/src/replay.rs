//! Append-only run log (JSON lines) and column extraction to CSV.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::comms::protocol::{Command, TelemetryFrame};
use crate::modes::ModeState;
use crate::power::Endurance;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("record time {t} does not follow {last}")]
    NotIncreasing { t: f64, last: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown field `{field}`; available: {}", available.join(", "))]
    UnknownField { field: String, available: Vec<&'static str> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedCommand {
    /// Session the command came from (0 is the scenario script).
    pub session: u64,
    /// Delivery time, s.
    pub t: f64,
    /// Mode in force when the command was executed.
    pub mode: ModeState,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub t: f64,
    pub frame: TelemetryFrame,
    /// Commands delivered since the previous record.
    pub commands: Vec<LoggedCommand>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayLog {
    records: Vec<LogRecord>,
}

impl ReplayLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LogRecord) -> Result<(), ReplayError> {
        if let Some(last) = self.records.last() {
            if !(record.t > last.t) {
                return Err(ReplayError::NotIncreasing { t: record.t, last: last.t });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn line(record: &LogRecord) -> String {
        serde_json::to_string(record).expect("log records hold only finite numbers")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&Self::line(r));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the JSON-lines serialization, lowercase hex.
    pub fn digest(&self) -> String {
        hex_digest(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReplayError> {
        let mut log = ReplayLog::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: LogRecord =
                serde_json::from_str(line).map_err(|e| ReplayError::Parse { line: i + 1, message: e.to_string() })?;
            log.push(record)?;
        }
        Ok(log)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

type Extractor = fn(&LogRecord) -> String;

fn num(x: f64) -> String {
    x.to_string()
}

fn max_contact(r: &LogRecord) -> f64 {
    r.frame.limbs.iter().map(|l| nalgebra::Vector3::from(l.contact_force).norm()).fold(0.0, f64::max)
}

const FIELDS: &[(&str, Extractor)] = &[
    ("t", |r| num(r.t)),
    ("x", |r| num(r.frame.vehicle.x)),
    ("y", |r| num(r.frame.vehicle.y)),
    ("z", |r| num(r.frame.vehicle.z)),
    ("psi", |r| num(r.frame.vehicle.psi)),
    ("u", |r| num(r.frame.vehicle.u)),
    ("v", |r| num(r.frame.vehicle.v)),
    ("r", |r| num(r.frame.vehicle.r)),
    ("w", |r| num(r.frame.vehicle.w)),
    ("nav_x", |r| num(r.frame.nav.mean[0])),
    ("nav_y", |r| num(r.frame.nav.mean[1])),
    ("nav_psi", |r| num(r.frame.nav.mean[2])),
    ("nav_error", |r| num((r.frame.nav.mean[0] - r.frame.vehicle.x).hypot(r.frame.nav.mean[1] - r.frame.vehicle.y))),
    ("nav_sigma", |r| num((r.frame.nav.cov[0] + r.frame.nav.cov[4]).sqrt())),
    ("cross_track_error", |r| r.frame.guidance.map(|g| num(g.cross_track_error)).unwrap_or_default()),
    ("active_waypoint", |r| r.frame.guidance.map(|g| g.active.to_string()).unwrap_or_default()),
    ("mode", |r| format!("{:?}/{:?}/{:?}", r.frame.mode.op, r.frame.mode.nav, r.frame.mode.link).to_uppercase()),
    ("hold_position", |r| r.frame.hold_position.to_string()),
    ("soc", |r| num(r.frame.power.soc)),
    ("load", |r| num(r.frame.power.loads.values().sum())),
    ("rolling_load", |r| num(r.frame.power.rolling_mean)),
    ("bus_voltage", |r| num(r.frame.power.bus_voltage)),
    ("endurance_h", |r| match r.frame.power.endurance {
        Endurance::Hours(h) => num(h),
        Endurance::Unbounded => "inf".into(),
    }),
    ("link_kind", |r| serde_json::to_value(r.frame.link.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
    ("link_available", |r| r.frame.link.available.to_string()),
    ("faults", |r| r.frame.faults.len().to_string()),
    ("contact_force", |r| num(max_contact(r))),
    ("haptic_force", |r| num(r.frame.limbs.iter().map(|l| nalgebra::Vector3::from(l.haptic_force).norm()).fold(0.0, f64::max))),
    ("patches", |r| r.frame.proxy.len().to_string()),
    ("commands", |r| r.commands.len().to_string()),
];

pub fn available_fields() -> Vec<&'static str> {
    FIELDS.iter().map(|(n, _)| *n).collect()
}

/// Extract the named columns, one row per record, as CSV with a header.
pub fn query(log: &ReplayLog, fields: &[&str]) -> Result<String, ReplayError> {
    let cols: Vec<Extractor> = fields
        .iter()
        .map(|f| {
            FIELDS
                .iter()
                .find(|(n, _)| n == f)
                .map(|(_, e)| *e)
                .ok_or_else(|| ReplayError::UnknownField { field: f.to_string(), available: available_fields() })
        })
        .collect::<Result<_, _>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields)?;
    for r in log.records() {
        w.write_record(cols.iter().map(|e| e(r)))?;
    }
    let bytes = w.into_inner().map_err(|e| ReplayError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
