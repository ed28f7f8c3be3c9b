//! Wire messages and their canonical JSON encoding.
//!
//! Every message travels in the envelope `{v, type, seq, t, body}`. Decoding
//! happens in two stages (envelope, then the body for the announced type) so
//! schema errors carry the full path, e.g. `body.payload.requested.op`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::contact::PlanePatch;
use crate::dynamics::VehicleState;
use crate::guidance::WaypointPlan;
use crate::limbs::{LimbId, TendonState, TipPose};
use crate::modes::{ModeState, ReasonCode, Rejection};
use crate::nav::NavEstimate;
use crate::power::{Endurance, Loads, PowerSource, Subsystem};
use crate::propulsion::FinState;
use crate::teleop::MasterCommand;

use super::link::LinkKind;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("encode failed: {0}")]
    Encode(String),
}

impl ProtocolError {
    pub fn rejection(&self) -> Rejection {
        Rejection::new(ReasonCode::MalformedMessage, self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Telemetry,
    Command,
    Ack,
    Reject,
    Haptic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavSummary {
    /// Estimated (x, y, psi).
    pub mean: [f64; 3],
    /// Row-major 3x3 covariance.
    pub cov: [f64; 9],
}

impl From<&NavEstimate> for NavSummary {
    fn from(est: &NavEstimate) -> Self {
        let mut cov = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                cov[3 * r + c] = est.cov[(r, c)];
            }
        }
        Self { mean: [est.mean[0], est.mean[1], est.mean[2]], cov }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSummary {
    /// Index of the waypoint being approached.
    pub active: usize,
    pub cross_track_error: f64,
    pub heading_cmd: f64,
    pub speed_cmd: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbTelemetry {
    pub limb: LimbId,
    /// Tip pose in the limb base frame.
    pub tip: TipPose,
    /// Tip position in the world frame as the robot believes it, m.
    pub tip_world: [f64; 3],
    pub tendons: TendonState,
    /// Force measured by the tip tactile sensor, N (world frame).
    pub contact_force: [f64; 3],
    /// Force predicted by the proxy model, N (world frame).
    pub haptic_force: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSummary {
    pub source: PowerSource,
    pub soc: f64,
    pub bus_voltage: f64,
    pub loads: Loads,
    pub rolling_mean: f64,
    pub endurance: Endurance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkReport {
    pub kind: LinkKind,
    pub available: bool,
    pub bandwidth_kbps: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultFlag {
    Overcurrent { subsystem: Subsystem },
    Undervoltage,
    PowerFail,
    Overload,
    LinkLost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryFrame {
    pub vehicle: VehicleState,
    pub nav: NavSummary,
    pub mode: ModeState,
    pub hold_position: bool,
    pub guidance: Option<GuidanceSummary>,
    pub limbs: Vec<LimbTelemetry>,
    pub power: PowerSummary,
    pub link: LinkReport,
    pub faults: Vec<FaultFlag>,
    pub proxy: Vec<PlanePatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HapticFrame {
    pub limb: LimbId,
    /// Rendered force, N (world frame).
    pub force: [f64; 3],
    /// Commanded tip position, m (world frame).
    pub target: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub command_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reject {
    /// `None` when the command could not be decoded far enough to read its id.
    pub command_id: Option<u64>,
    pub code: ReasonCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommandKind {
    ModeTransition { requested: ModeState },
    WaypointUpload { plan: WaypointPlan },
    FinOverride { fins: Vec<FinState> },
    LimbMaster { limb: LimbId, command: MasterCommand },
    JetFire { pump: f64, valve_open: bool, nozzle_angle: f64 },
    EmergencyStop {},
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::ModeTransition { .. } => "mode_transition",
            CommandKind::WaypointUpload { .. } => "waypoint_upload",
            CommandKind::FinOverride { .. } => "fin_override",
            CommandKind::LimbMaster { .. } => "limb_master",
            CommandKind::JetFire { .. } => "jet_fire",
            CommandKind::EmergencyStop {} => "emergency_stop",
        }
    }
}

/// Operator command; on the wire `{"id", "kind", "payload"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub id: u64,
    pub kind: CommandKind,
}

impl Command {
    pub fn is_emergency_stop(&self) -> bool {
        matches!(self.kind, CommandKind::EmergencyStop {})
    }
}

impl Serialize for Command {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            id: u64,
            #[serde(flatten)]
            kind: &'a CommandKind,
        }
        Out { id: self.id, kind: &self.kind }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Command {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Box::<RawValue>::deserialize(d)?;
        command_from_raw(raw.get(), "").map_err(serde::de::Error::custom)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandIn<'a> {
    id: u64,
    kind: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

/// Parse the command header, then the payload for its kind, keeping paths.
fn command_from_raw(raw: &str, prefix: &str) -> Result<Command, ProtocolError> {
    let mut de = serde_json::Deserializer::from_str(raw);
    let head: CommandIn = serde_path_to_error::deserialize(&mut de).map_err(|e| schema_err(prefix, e))?;
    let kind_json = serde_json::to_string(&head.kind).map_err(|e| ProtocolError::Encode(e.to_string()))?;
    let tagged = format!("{{\"kind\":{kind_json},\"payload\":{}}}", head.payload.get());
    let mut de = serde_json::Deserializer::from_str(&tagged);
    let kind = serde_path_to_error::deserialize(&mut de).map_err(|e| schema_err(prefix, e))?;
    Ok(Command { id: head.id, kind })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Telemetry(Box<TelemetryFrame>),
    Command(Command),
    Ack(Ack),
    Reject(Reject),
    Haptic(HapticFrame),
}

impl Body {
    pub fn message_type(&self) -> MessageType {
        match self {
            Body::Telemetry(_) => MessageType::Telemetry,
            Body::Command(_) => MessageType::Command,
            Body::Ack(_) => MessageType::Ack,
            Body::Reject(_) => MessageType::Reject,
            Body::Haptic(_) => MessageType::Haptic,
        }
    }

    /// Stream messages (telemetry, haptics) may be dropped under congestion.
    pub fn droppable(&self) -> bool {
        matches!(self, Body::Telemetry(_) | Body::Haptic(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    /// Sim time, s.
    pub t: f64,
    pub body: Body,
}

#[derive(Serialize)]
struct EnvelopeOut<'a, B> {
    v: u32,
    #[serde(rename = "type")]
    kind: MessageType,
    seq: u64,
    t: f64,
    body: &'a B,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn<'a> {
    v: u32,
    #[serde(rename = "type")]
    kind: MessageType,
    seq: u64,
    t: f64,
    #[serde(borrow)]
    body: &'a RawValue,
}

fn out<B: Serialize>(m: &Message, body: &B) -> Result<String, ProtocolError> {
    let env = EnvelopeOut { v: PROTOCOL_VERSION, kind: m.body.message_type(), seq: m.seq, t: m.t, body };
    serde_json::to_string(&env).map_err(|e| ProtocolError::Encode(e.to_string()))
}

/// Canonical encoding: compact JSON, struct field order, shortest
/// round-trip floats.
pub fn encode(m: &Message) -> Result<String, ProtocolError> {
    if !m.t.is_finite() {
        return Err(ProtocolError::Encode("non-finite timestamp".into()));
    }
    match &m.body {
        Body::Telemetry(b) => out(m, b),
        Body::Command(b) => out(m, b),
        Body::Ack(b) => out(m, b),
        Body::Reject(b) => out(m, b),
        Body::Haptic(b) => out(m, b),
    }
}

fn schema_err(prefix: &str, e: serde_path_to_error::Error<serde_json::Error>) -> ProtocolError {
    let inner = e.path().to_string();
    let path = match (prefix, inner.as_str()) {
        ("", p) => p.to_string(),
        (pre, ".") => pre.to_string(),
        (pre, p) => format!("{pre}.{p}"),
    };
    ProtocolError::Schema { path, message: e.into_inner().to_string() }
}

fn body<T: DeserializeOwned>(raw: &RawValue) -> Result<T, ProtocolError> {
    let mut de = serde_json::Deserializer::from_str(raw.get());
    serde_path_to_error::deserialize(&mut de).map_err(|e| schema_err("body", e))
}

/// Decode one message. Total: every input yields a message or an error.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let env: EnvelopeIn = serde_path_to_error::deserialize(&mut de).map_err(|e| schema_err("", e))?;
    de.end().map_err(|e| ProtocolError::Schema { path: ".".into(), message: e.to_string() })?;
    if env.v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(env.v));
    }
    if !env.t.is_finite() {
        return Err(ProtocolError::Schema { path: "t".into(), message: "non-finite timestamp".into() });
    }
    let b = match env.kind {
        MessageType::Telemetry => Body::Telemetry(Box::new(body(env.body)?)),
        MessageType::Command => Body::Command(command_from_raw(env.body.get(), "body")?),
        MessageType::Ack => Body::Ack(body(env.body)?),
        MessageType::Reject => Body::Reject(body(env.body)?),
        MessageType::Haptic => Body::Haptic(body(env.body)?),
    };
    Ok(Message { seq: env.seq, t: env.t, body: b })
}

/// Best-effort command id of an undecodable message, for the reject reply.
pub fn salvage_command_id(bytes: &[u8]) -> Option<u64> {
    let v: serde_json::Value = serde_json::from_slice(bytes).ok()?;
    v.get("body")?.get("id")?.as_u64()
}
