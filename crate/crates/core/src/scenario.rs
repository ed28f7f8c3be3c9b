//! Scenario files: every tunable of a run in one TOML document.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

use crate::comms::protocol::CommandKind;
use crate::comms::session::SessionConfig;
use crate::comms::LinkSet;
use crate::contact::PlanePatch;
use crate::dynamics::VehicleParams;
use crate::guidance::{AutopilotGains, DepthGains, LosParams, StationGains, WaypointPlan};
use crate::limbs::{LimbGeometry, LimbId};
use crate::modes::ModeState;
use crate::nav::{LandmarkMap, NavParams, NoiseConfig};
use crate::power::{PowerParams, PowerSource};
use crate::propulsion::{FinParams, JetParams};
use crate::teleop::{ProxyBuildParams, ReconcileParams};

/// One violated constraint, addressed by its dotted path in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("{} invalid field(s): {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl ScenarioError {
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            ScenarioError::Parse { path, message } => vec![Violation { path: path.clone(), message: message.clone() }],
            ScenarioError::Invalid(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    /// Constant water current in the north-east plane, m/s.
    pub current: [f64; 2],
    /// True contact surfaces in the world frame; their stiffness is what
    /// the tactile sensors feel.
    pub contact_planes: Vec<PlanePatch>,
    /// Optical base station position (north, east) at the surface, m.
    pub station: [f64; 2],
    /// Spacing of the synthetic depth-sensor samples on each surface, m.
    pub sample_spacing: f64,
    /// Standard deviation of depth-sample noise, m.
    pub sample_noise: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            current: [0.0, 0.0],
            contact_planes: Vec::new(),
            station: [0.0, 0.0],
            sample_spacing: 0.05,
            sample_noise: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbMount {
    pub limb: LimbId,
    /// Base position in the body frame, m.
    pub offset: [f64; 3],
    /// Base rotation about the body z axis, rad.
    #[serde(default)]
    pub yaw: f64,
    /// Base rotation about the body y axis, rad (pi/2 points the limb forward).
    #[serde(default)]
    pub pitch: f64,
    /// Curvature of the stowed configuration, 1/m.
    #[serde(default)]
    pub stow_kappa: f64,
    /// Bending plane of the stowed configuration, rad.
    #[serde(default)]
    pub stow_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimbSetup {
    pub geometry: LimbGeometry,
    pub mounts: Vec<LimbMount>,
    /// Tendon pretension, N.
    pub pretension: f64,
    /// Tendon axial stiffness, N/m.
    pub tendon_stiffness: f64,
}

impl Default for LimbSetup {
    fn default() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mount = |limb, offset: [f64; 3]| LimbMount { limb, offset, yaw: 0.0, pitch: half_pi, stow_kappa: 2.0, stow_phi: 0.0 };
        Self {
            geometry: LimbGeometry::default(),
            mounts: vec![
                mount(LimbId::ArmPort, [0.45, -0.12, 0.05]),
                mount(LimbId::ArmStbd, [0.45, 0.12, 0.05]),
                mount(LimbId::Camera, [0.5, -0.05, -0.05]),
                mount(LimbId::Light, [0.5, 0.05, -0.05]),
            ],
            pretension: 2.0,
            tendon_stiffness: 800.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavSetup {
    pub params: NavParams,
    /// Initial 1-sigma uncertainty of (x, y, psi).
    pub initial_sigma: [f64; 3],
    /// Initial estimate offset from the truth (x, y, psi).
    pub initial_error: [f64; 3],
    pub sonar_hz: f64,
    pub gnss_hz: f64,
    /// Time constant of the first-order filter on the depth sensor, s.
    /// Zero uses the raw reading.
    pub depth_filter_tau: f64,
}

impl Default for NavSetup {
    fn default() -> Self {
        Self {
            params: NavParams::default(),
            initial_sigma: [2.0, 2.0, 0.1],
            initial_error: [0.0, 0.0, 0.0],
            sonar_hz: 10.0,
            gnss_hz: 1.0,
            depth_filter_tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSetup {
    pub los: LosParams,
    pub autopilot: AutopilotGains,
    pub depth: DepthGains,
    pub station: StationGains,
}

/// Electrical loads as a function of actuator activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadModel {
    pub computers_w: f64,
    pub payload_w: f64,
    pub comms_umbilical_w: f64,
    pub comms_vlc_w: f64,
    pub comms_lte_w: f64,
    pub propulsion_idle_w: f64,
    /// Per newton of total fin thrust, W/N.
    pub propulsion_w_per_n: f64,
    /// Jet pump, W per L/s.
    pub pump_w_per_lps: f64,
    pub limbs_idle_w: f64,
    /// Per newton of total tendon tension, W/N.
    pub limbs_w_per_n: f64,
}

impl Default for LoadModel {
    fn default() -> Self {
        Self {
            computers_w: 20.0,
            payload_w: 15.0,
            comms_umbilical_w: 5.0,
            comms_vlc_w: 8.0,
            comms_lte_w: 6.0,
            propulsion_idle_w: 2.0,
            propulsion_w_per_n: 1.5,
            pump_w_per_lps: 80.0,
            limbs_idle_w: 2.0,
            limbs_w_per_n: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSetup {
    pub params: PowerParams,
    /// Initial stored energy, Wh (full when absent).
    pub initial_soc: Option<f64>,
    pub loads: LoadModel,
}

impl Default for PowerSetup {
    fn default() -> Self {
        Self { params: PowerParams::default(), initial_soc: None, loads: LoadModel::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopSetup {
    pub proxy: ProxyBuildParams,
    pub reconcile: ReconcileParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub telemetry_hz: f64,
    pub haptic_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { telemetry_hz: 10.0, haptic_hz: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Initial {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub psi: f64,
    pub mode: ModeState,
}

impl Default for Initial {
    fn default() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, psi: 0.0, mode: ModeState::default() }
    }
}

/// An operator command injected at a fixed sim time through the same
/// session path as live commands. `repeat` copies are sent `every` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub at: f64,
    pub command: CommandKind,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default)]
    pub every: f64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Simulated time, s.
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub vehicle: VehicleParams,
    pub fins: FinParams,
    pub jet: JetParams,
    pub limbs: LimbSetup,
    pub landmarks: LandmarkMap,
    pub plan: Option<WaypointPlan>,
    pub environment: Environment,
    pub noise: NoiseConfig,
    pub nav: NavSetup,
    pub guidance: GuidanceSetup,
    pub links: LinkSet,
    pub session: SessionConfig,
    pub power: PowerSetup,
    pub teleop: TeleopSetup,
    pub rates: Rates,
    pub initial: Initial,
    pub script: Vec<ScriptEntry>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            duration: 0.0,
            dt: 0.01,
            seed: 0,
            vehicle: VehicleParams::default(),
            fins: FinParams::default(),
            jet: JetParams::default(),
            limbs: LimbSetup::default(),
            landmarks: LandmarkMap::default(),
            plan: None,
            environment: Environment::default(),
            noise: NoiseConfig::default(),
            nav: NavSetup::default(),
            guidance: GuidanceSetup::default(),
            links: LinkSet::default(),
            session: SessionConfig::default(),
            power: PowerSetup::default(),
            teleop: TeleopSetup::default(),
            rates: Rates::default(),
            initial: Initial::default(),
            script: Vec::new(),
        }
    }
}

fn parse_err<E: fmt::Display>(e: serde_path_to_error::Error<E>) -> ScenarioError {
    ScenarioError::Parse { path: e.path().to_string(), message: e.into_inner().to_string() }
}

impl Scenario {
    /// Parse and validate a TOML scenario.
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| ScenarioError::Parse { path: ".".into(), message: e.to_string() })?;
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(parse_err)?;
        s.validate()?;
        Ok(s)
    }

    /// Parse and validate a JSON scenario (the live server's POST body).
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(&mut de).map_err(parse_err)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    /// Base ticks per period of a rate, if the rate divides the base rate.
    pub fn divider(&self, hz: f64) -> Option<u64> {
        let n = (1.0 / (hz * self.dt)).round();
        (n >= 1.0 && ((n * hz * self.dt) - 1.0).abs() < 1e-9).then_some(n as u64)
    }

    pub fn dt_us(&self) -> u64 {
        (self.dt * 1e6).round() as u64
    }

    pub fn ticks(&self) -> u64 {
        (self.duration / self.dt).round() as u64
    }

    /// Source the power model starts on, from the initial link mode.
    pub fn initial_power_source(&self) -> PowerSource {
        crate::power::source_for(self.initial.mode.link)
    }

    /// Check every embedded constraint and report all violations.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut v = Vec::new();
        let mut bad = |path: &str, message: String| v.push(Violation { path: path.into(), message });
        if !(self.dt > 0.0 && self.dt <= crate::dynamics::MAX_DT) {
            bad("dt", format!("must be in (0, {}]", crate::dynamics::MAX_DT));
        } else if ((self.dt * 1e6).round() - self.dt * 1e6).abs() > 1e-6 {
            bad("dt", "must be a whole number of microseconds".into());
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            bad("duration", "must be finite and non-negative".into());
        }
        if self.dt > 0.0 {
            for (hz, path) in [(self.rates.telemetry_hz, "rates.telemetry_hz"), (self.rates.haptic_hz, "rates.haptic_hz")] {
                if !(hz > 0.0) || self.divider(hz).is_none() {
                    bad(path, format!("must divide the base rate {} Hz", 1.0 / self.dt));
                }
            }
            for (hz, path) in [(self.nav.sonar_hz, "nav.sonar_hz"), (self.nav.gnss_hz, "nav.gnss_hz")] {
                if !(hz > 0.0) || self.divider(hz).is_none() {
                    bad(path, format!("must divide the base rate {} Hz", 1.0 / self.dt));
                }
            }
        }
        if !(self.nav.depth_filter_tau >= 0.0 && self.nav.depth_filter_tau.is_finite()) {
            bad("nav.depth_filter_tau", "must be finite and non-negative".into());
        }
        if let Err(e) = self.vehicle.validate() {
            bad("vehicle", e.to_string());
        }
        if self.vehicle.current != [0.0, 0.0] {
            bad("vehicle.current", "set the water current under environment.current".into());
        }
        if let Err(e) = self.fins.validate() {
            bad("fins", e.to_string());
        }
        if let Err(e) = self.jet.validate() {
            bad("jet", e.to_string());
        }
        if let Err(e) = self.limbs.geometry.validate() {
            bad("limbs.geometry", e.to_string());
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.limbs.mounts.iter().enumerate() {
            if !seen.insert(m.limb) {
                bad(&format!("limbs.mounts[{i}].limb"), format!("{:?} mounted twice", m.limb));
            }
            let finite = m.offset.iter().chain([m.yaw, m.pitch, m.stow_kappa, m.stow_phi].iter()).all(|c| c.is_finite());
            if !finite {
                bad(&format!("limbs.mounts[{i}]"), "values must be finite".into());
            }
            if m.stow_kappa.abs() > self.limbs.geometry.kappa_limit() {
                bad(&format!("limbs.mounts[{i}].stow_kappa"), "exceeds the curvature limit".into());
            }
        }
        if !(self.limbs.pretension >= 0.0 && self.limbs.tendon_stiffness > 0.0) {
            bad("limbs", "pretension must be >= 0 and tendon_stiffness > 0".into());
        }
        if let Err(e) = self.landmarks.validate() {
            bad("landmarks", e.to_string());
        }
        if let Some(plan) = &self.plan {
            if let Err(e) = plan.validate() {
                bad("plan", e.to_string());
            }
        }
        let env = &self.environment;
        if !env.current.iter().all(|c| c.is_finite()) {
            bad("environment.current", "must be finite".into());
        }
        for (i, p) in env.contact_planes.iter().enumerate() {
            if !((p.normal.norm() - 1.0).abs() < 1e-9 && p.offset.is_finite() && p.stiffness > 0.0) {
                bad(&format!("environment.contact_planes[{i}]"), "needs a unit normal, finite offset and positive stiffness".into());
            }
            if p.extent.is_none() {
                bad(&format!("environment.contact_planes[{i}].extent"), "true surfaces must be bounded".into());
            }
        }
        if !(env.sample_spacing > 0.0 && env.sample_noise >= 0.0) {
            bad("environment", "sample_spacing must be positive and sample_noise >= 0".into());
        }
        if let Err(e) = self.noise.validate() {
            bad("noise", e.to_string());
        }
        if !self.nav.initial_sigma.iter().all(|s| *s > 0.0 && s.is_finite()) {
            bad("nav.initial_sigma", "must be positive".into());
        }
        if !self.nav.params.process_noise.iter().all(|q| *q >= 0.0 && q.is_finite()) {
            bad("nav.params.process_noise", "must be non-negative".into());
        }
        if let Err(e) = self.links.validate() {
            bad("links", e.to_string());
        }
        if !(self.session.burst_s > 0.0 && self.session.burst_s.is_finite()) {
            bad("session.burst_s", "must be positive".into());
        }
        if let Err(e) = self.power.params.validate() {
            bad("power.params", e.to_string());
        }
        if let Some(soc) = self.power.initial_soc {
            if !(0.0..=self.power.params.capacity_wh()).contains(&soc) {
                bad("power.initial_soc", format!("must be within [0, {}] Wh", self.power.params.capacity_wh()));
            }
        }
        if !(self.teleop.proxy.stiffness > 0.0 && self.teleop.proxy.damping >= 0.0 && self.teleop.proxy.cluster_radius > 0.0) {
            bad("teleop.proxy", "stiffness and cluster_radius must be positive, damping >= 0".into());
        }
        let init = &self.initial;
        if !(init.z >= 0.0 && [init.x, init.y, init.z, init.psi].iter().all(|c| c.is_finite())) {
            bad("initial", "pose must be finite with z >= 0".into());
        }
        if !init.mode.is_valid() {
            bad("initial.mode", format!("{} is not a valid mode", init.mode));
        }
        for (i, s) in self.script.iter().enumerate() {
            if !(s.at >= 0.0 && s.at.is_finite()) {
                bad(&format!("script[{i}].at"), "must be finite and non-negative".into());
            }
            if s.repeat == 0 || !(s.every >= 0.0 && s.every.is_finite()) || (s.repeat > 1 && s.every <= 0.0) {
                bad(&format!("script[{i}]"), "repeat must be >= 1 with a positive `every` when above 1".into());
            }
            match &s.command {
                CommandKind::WaypointUpload { plan } => {
                    if let Err(e) = plan.validate() {
                        bad(&format!("script[{i}].command.payload.plan"), e.to_string());
                    }
                }
                CommandKind::LimbMaster { command, .. } => {
                    if let Err(e) = command.validate() {
                        bad(&format!("script[{i}].command.payload.command"), e.to_string());
                    }
                }
                _ => {}
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(v))
        }
    }
}
