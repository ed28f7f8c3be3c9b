//! Operational / navigation / link mode machine and the semi-autonomous
//! posture (SAUTPOS) controller.

use nalgebra::{Isometry3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::dynamics::{VehicleState, Wrench};
use crate::guidance::{station_keeping, StationGains};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpMode {
    Exp,
    Int,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NavMode {
    Autnav,
    Mancon,
    Sautpos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LinkMode {
    Tet,
    Nowire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeState {
    pub op: OpMode,
    pub nav: NavMode,
    pub link: LinkMode,
}

impl ModeState {
    pub const fn new(op: OpMode, nav: NavMode, link: LinkMode) -> Self {
        Self { op, nav, link }
    }

    /// All 12 combinations, valid or not.
    pub fn all() -> Vec<ModeState> {
        let mut out = Vec::with_capacity(12);
        for op in [OpMode::Exp, OpMode::Int] {
            for nav in [NavMode::Autnav, NavMode::Mancon, NavMode::Sautpos] {
                for link in [LinkMode::Tet, LinkMode::Nowire] {
                    out.push(ModeState { op, nav, link });
                }
            }
        }
        out
    }

    /// MANCON/SAUTPOS only exist inside INT (equivalently EXP implies AUTNAV).
    pub fn is_valid(&self) -> bool {
        self.op == OpMode::Int || self.nav == NavMode::Autnav
    }

    pub fn is_teleop(&self) -> bool {
        matches!(self.nav, NavMode::Mancon | NavMode::Sautpos)
    }

    /// Limb commands are only executed in INT with MANCON or SAUTPOS.
    pub fn permits_limbs(&self) -> bool {
        self.op == OpMode::Int && self.is_teleop()
    }
}

impl Default for ModeState {
    fn default() -> Self {
        Self::new(OpMode::Exp, NavMode::Autnav, LinkMode::Tet)
    }
}

impl fmt::Display for ModeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}, {:?}, {:?})", self.op, self.nav, self.link)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionSource {
    Operator,
    Autonomy,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEvent {
    pub requested: ModeState,
    pub source: TransitionSource,
}

/// Availability of the wireless command link (the tether is always up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkStatus {
    pub wireless_available: bool,
}

impl LinkStatus {
    pub fn available(&self, link: LinkMode) -> bool {
        link == LinkMode::Tet || self.wireless_available
    }
}

/// Machine-readable rejection codes shared by transitions and commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    /// MANCON or SAUTPOS requested outside INT.
    TeleopRequiresInt,
    /// The command link of the requested mode is down.
    LinkUnavailable,
    /// Limb or manual actuator command outside a teleoperation mode.
    ModeForbidsCommand,
    /// Payload failed semantic validation.
    InvalidPayload,
    /// Command refers to something not present (e.g. unknown fin or limb).
    UnknownTarget,
    /// Bytes that do not decode to a message.
    MalformedMessage,
}

impl ReasonCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReasonCode::TeleopRequiresInt => "teleop_requires_int",
            ReasonCode::LinkUnavailable => "link_unavailable",
            ReasonCode::ModeForbidsCommand => "mode_forbids_command",
            ReasonCode::InvalidPayload => "invalid_payload",
            ReasonCode::UnknownTarget => "unknown_target",
            ReasonCode::MalformedMessage => "malformed_message",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{}: {message}", code.as_str())]
pub struct Rejection {
    pub code: ReasonCode,
    pub message: String,
}

impl Rejection {
    pub fn new(code: ReasonCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    pub state: ModeState,
    /// Station keeping at the current pose was forced.
    pub hold_position: bool,
}

/// Decide a mode transition.
///
/// Fault events are never rejected: they drop navigation to AUTNAV with
/// position hold, keeping the operational and link modes.
pub fn request_transition(
    current: ModeState,
    event: &TransitionEvent,
    link: &LinkStatus,
) -> Result<TransitionOutcome, Rejection> {
    if event.source == TransitionSource::Fault {
        let state = ModeState { nav: NavMode::Autnav, ..current };
        return Ok(TransitionOutcome { state, hold_position: true });
    }
    let target = event.requested;
    if !target.is_valid() {
        return Err(Rejection::new(
            ReasonCode::TeleopRequiresInt,
            format!("{:?} requires INT", target.nav),
        ));
    }
    if !link.available(target.link) {
        return Err(Rejection::new(ReasonCode::LinkUnavailable, "wireless link unavailable"));
    }
    Ok(TransitionOutcome { state: target, hold_position: false })
}

/// Emit a fault event when a teleoperation mode has lost its command link.
pub fn supervise(current: ModeState, link: &LinkStatus) -> Option<TransitionEvent> {
    (current.is_teleop() && !link.available(current.link)).then_some(TransitionEvent {
        requested: ModeState { nav: NavMode::Autnav, ..current },
        source: TransitionSource::Fault,
    })
}

/// Fraction of the limb length usable before the base has to move.
pub const REACH_MARGIN: f64 = 0.9;

/// A world-frame tip target for one limb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachTask {
    /// Limb base pose in the world frame.
    pub base: Isometry3<f64>,
    pub length: f64,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SautposOutput {
    pub wrench: Wrench,
    /// Station-keeping setpoint (x, y, psi) after the reach shift.
    pub setpoint: [f64; 3],
    /// Tip targets expressed in each limb's base frame.
    pub limb_targets: Vec<Vector3<f64>>,
}

/// Whole-body posture step.
///
/// Primary task: the limb tips, handed to the limbs as base-frame targets
/// (so base motion is compensated every tick). Secondary task: station
/// keeping, whose setpoint is only moved horizontally when a target lies
/// beyond `REACH_MARGIN` of its limb's length.
pub fn sautpos_step(
    mode: ModeState,
    state: &VehicleState,
    setpoint: [f64; 3],
    tasks: &[ReachTask],
    gains: &StationGains,
) -> Result<SautposOutput, Rejection> {
    if !(mode.op == OpMode::Int && mode.nav == NavMode::Sautpos) {
        return Err(Rejection::new(ReasonCode::ModeForbidsCommand, "posture control requires INT + SAUTPOS"));
    }
    let mut shift = Vector3::zeros();
    for task in tasks {
        let base = task.base.translation.vector;
        let offset = task.target - base;
        let excess = offset.norm() - REACH_MARGIN * task.length;
        if excess > 0.0 {
            let horizontal = Vector3::new(offset.x, offset.y, 0.0);
            if horizontal.norm() > 1e-12 {
                let step = horizontal.normalize() * excess;
                if step.norm() > shift.norm() {
                    shift = step;
                }
            }
        }
    }
    let setpoint = [setpoint[0] + shift.x, setpoint[1] + shift.y, setpoint[2]];
    let wrench = station_keeping(state, setpoint, gains);
    let limb_targets = tasks
        .iter()
        .map(|t| t.base.inverse_transform_point(&Point3::from(t.target)).coords)
        .collect();
    Ok(SautposOutput { wrench, setpoint, limb_targets })
}
