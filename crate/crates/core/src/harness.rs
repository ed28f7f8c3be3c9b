//! The deterministic master loop.
//!
//! One clock drives everything: per base tick the loop runs
//! sense -> nav predict/update -> comms ingress and the mode machine ->
//! guidance or teleop -> allocation -> propulsion -> dynamics -> power ->
//! telemetry. Slower streams (sonar, GNSS, haptics, telemetry) run on
//! integer dividers of the base rate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Isometry3, Matrix3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::link::{LinkError, LinkGeometry, LinkQuality};
use crate::comms::protocol::*;
use crate::comms::session::{validate_command, Session, US_PER_S};
use crate::contact::{in_plane_basis, ProxyEnvironment};
use crate::dynamics::{step_dynamics, DynamicsError, VehicleParams, VehicleState, Wrench};
use crate::guidance::{autopilot, depth_control, los_step, station_keeping, AutopilotState, LosState, WaypointPlan};
use crate::limbs::{forward_kinematics, mirror_config, tendon_state, LimbConfig, LimbError, LimbId};
use crate::modes::{
    request_transition, sautpos_step, supervise, LinkStatus, ModeState, NavMode, ReachTask, ReasonCode, Rejection,
    TransitionEvent, TransitionSource,
};
use crate::nav::{gnss_reset, predict, sense, update, NavEstimate};
use crate::power::{
    detect_faults, endurance_estimate, source_for, step_power, FaultMonitor, Loads, PowerError, PowerEvent, PowerFault,
    PowerState, Subsystem,
};
use crate::propulsion::{allocate, fin_force, fin_wrench, jet_step, FinState, JetState, PropulsionError};
use crate::replay::{LogRecord, LoggedCommand, ReplayError, ReplayLog};
use crate::scenario::{LimbMount, Scenario, ScenarioError};
use crate::teleop::{
    build_proxy, reconcile, teleop_tick, MasterCommand, ProxyBuildParams, TactileMeasurement,
    TeleopError, TeleopState,
};

pub type SessionId = u64;
/// Session carrying the scenario's scripted operator commands.
pub const SCRIPT_SESSION: SessionId = 0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("propulsion: {0}")]
    Propulsion(#[from] PropulsionError),
    #[error("limbs: {0}")]
    Limb(#[from] LimbError),
    #[error("power: {0}")]
    Power(#[from] PowerError),
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("teleop: {0}")]
    Teleop(#[from] TeleopError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("replay: {0}")]
    Replay(#[from] ReplayError),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
}

#[derive(Debug, Clone)]
struct LimbRuntime {
    mount: LimbMount,
    config: LimbConfig,
    /// Commanded tip position (world frame, believed pose).
    target: Vector3<f64>,
    /// Operator has taken this limb since entering a teleoperation mode.
    engaged: bool,
    queue: VecDeque<MasterCommand>,
    contact: Vector3<f64>,
    haptic: Vector3<f64>,
    tension: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GuidanceState {
    Idle,
    Following,
    Finished,
}

/// Summary printed at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub ticks: u64,
    pub records: usize,
    pub digest: String,
    pub final_state: VehicleState,
    pub final_mode: ModeState,
    pub delivered: usize,
    pub rejected: usize,
    pub soc: f64,
}

/// Output of one tick.
#[derive(Debug, Default)]
pub struct TickOutput {
    /// Encoded messages reaching each operator session.
    pub outbound: Vec<(SessionId, String)>,
    pub record: Option<LogRecord>,
}

fn vehicle_iso(x: f64, y: f64, z: f64, psi: f64) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::new(x, y, z), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi))
}

fn mount_iso(m: &LimbMount) -> Isometry3<f64> {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), m.yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), m.pitch);
    Isometry3::from_parts(Translation3::from(Vector3::from(m.offset)), rot)
}

fn to3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub struct Simulation {
    sc: Scenario,
    params: VehicleParams,
    dt_us: u64,
    tick: u64,
    telemetry_div: u64,
    haptic_div: u64,
    sonar_div: u64,
    gnss_div: u64,

    truth: VehicleState,
    nav: NavEstimate,
    belief: VehicleState,

    mode: ModeState,
    hold: Option<[f64; 3]>,
    setpoint: [f64; 3],
    estop: bool,

    plan: Option<WaypointPlan>,
    guidance: GuidanceState,
    los: LosState,
    last_los: Option<GuidanceSummary>,
    autopilot: AutopilotState,
    depth_target: f64,
    depth_integral: f64,

    fins: Vec<FinState>,
    fin_override: Option<Vec<FinState>>,
    jet: JetState,
    jet_cmd: (f64, bool, f64),

    limbs: BTreeMap<LimbId, LimbRuntime>,
    proxy: ProxyEnvironment,
    truth_env: ProxyEnvironment,

    power: PowerState,
    monitor: FaultMonitor,
    faults: BTreeSet<FaultFlag>,
    link: LinkQuality,
    wireless: bool,

    sessions: BTreeMap<SessionId, Session>,
    next_session: SessionId,
    script: VecDeque<(u64, Command)>,
    pending_log: Vec<LoggedCommand>,
    delivered: usize,
    rejected: usize,
}

impl Simulation {
    pub fn new(sc: Scenario) -> Result<Self, HarnessError> {
        sc.validate()?;
        let mut params = sc.vehicle.clone();
        params.current = sc.environment.current;
        let init = sc.initial;
        let truth = VehicleState::at(init.x, init.y, init.z, init.psi);
        let sig = sc.nav.initial_sigma;
        let err = sc.nav.initial_error;
        let nav = NavEstimate::new(
            init.x + err[0],
            init.y + err[1],
            init.psi + err[2],
            Matrix3::from_diagonal(&Vector3::new(sig[0] * sig[0], sig[1] * sig[1], sig[2] * sig[2])),
        );
        let div = |hz: f64| sc.divider(hz).expect("validated divider");

        let mut script = Vec::new();
        for (i, entry) in sc.script.iter().enumerate() {
            for k in 0..entry.repeat {
                let at = ((entry.at + k as f64 * entry.every) * 1e6).round() as u64;
                script.push((at, i, k, entry.command.clone()));
            }
        }
        script.sort_by_key(|(at, i, k, _)| (*at, *i, *k));
        let script = script
            .into_iter()
            .enumerate()
            .map(|(n, (at, _, _, kind))| (at, Command { id: n as u64 + 1, kind }))
            .collect();

        let truth_env = ProxyEnvironment { patches: sc.environment.contact_planes.clone(), stiffness: 1.0, damping: 0.0 };
        let proxy = survey_proxy(&sc)?;
        let power = crate::power::PowerState::new(
            sc.initial_power_source(),
            sc.power.initial_soc.unwrap_or(sc.power.params.capacity_wh()),
            &sc.power.params,
        );
        let mut sessions = BTreeMap::new();
        sessions.insert(SCRIPT_SESSION, Session::new(sc.session));

        let mut sim = Self {
            params,
            dt_us: sc.dt_us(),
            tick: 0,
            telemetry_div: div(sc.rates.telemetry_hz),
            haptic_div: div(sc.rates.haptic_hz),
            sonar_div: div(sc.nav.sonar_hz),
            gnss_div: div(sc.nav.gnss_hz),
            truth,
            nav,
            belief: truth,
            mode: init.mode,
            hold: None,
            setpoint: [nav.mean[0], nav.mean[1], nav.mean[2]],
            estop: false,
            plan: None,
            guidance: GuidanceState::Idle,
            los: LosState::default(),
            last_los: None,
            autopilot: AutopilotState::default(),
            depth_target: init.z,
            depth_integral: 0.0,
            fins: sc.fins.idle_fins(),
            fin_override: None,
            jet: JetState::default(),
            jet_cmd: (0.0, false, 0.0),
            limbs: BTreeMap::new(),
            proxy,
            truth_env,
            power,
            monitor: FaultMonitor::default(),
            faults: BTreeSet::new(),
            link: LinkQuality::down(crate::comms::LinkKind::Umbilical),
            wireless: false,
            sessions,
            next_session: SCRIPT_SESSION + 1,
            script,
            pending_log: Vec::new(),
            delivered: 0,
            rejected: 0,
            sc,
        };
        if let Some(plan) = sim.sc.plan.clone() {
            sim.start_plan(plan);
        }
        sim.init_limbs()?;
        sim.update_link()?;
        Ok(sim)
    }

    fn stow_config(&self, limb: LimbId) -> LimbConfig {
        let n = self.sc.limbs.geometry.n_segments;
        let mounts = &self.sc.limbs.mounts;
        let stow = |id: LimbId| {
            mounts.iter().find(|m| m.limb == id).map(|m| LimbConfig::uniform(n, m.stow_kappa, m.stow_phi))
        };
        // the light follows the camera as its mirror image
        match (limb, stow(LimbId::Camera)) {
            (LimbId::Light, Some(cam)) => mirror_config(&cam),
            _ => stow(limb).unwrap_or_else(|| LimbConfig::uniform(n, 0.0, 0.0)),
        }
    }

    fn init_limbs(&mut self) -> Result<(), HarnessError> {
        for m in self.sc.limbs.mounts.clone() {
            let mut rt = LimbRuntime {
                mount: m,
                config: self.stow_config(m.limb),
                target: Vector3::zeros(),
                engaged: false,
                queue: VecDeque::new(),
                contact: Vector3::zeros(),
                haptic: Vector3::zeros(),
                tension: 0.0,
            };
            self.refresh_limb(&mut rt)?;
            self.limbs.insert(m.limb, rt);
        }
        Ok(())
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn now_us(&self) -> u64 {
        self.tick * self.dt_us
    }

    pub fn time(&self) -> f64 {
        self.now_us() as f64 / US_PER_S as f64
    }

    pub fn finished(&self) -> bool {
        self.tick >= self.sc.ticks()
    }

    pub fn truth(&self) -> &VehicleState {
        &self.truth
    }

    pub fn mode(&self) -> ModeState {
        self.mode
    }

    pub fn proxy(&self) -> &ProxyEnvironment {
        &self.proxy
    }

    pub fn open_session(&mut self) -> SessionId {
        let id = self.next_session;
        self.next_session += 1;
        self.sessions.insert(id, Session::starting_at(self.sc.session, self.now_us()));
        id
    }

    pub fn close_session(&mut self, id: SessionId) {
        if id != SCRIPT_SESSION {
            self.sessions.remove(&id);
        }
    }

    /// Operator bytes arriving on a session before the next tick.
    pub fn receive(&mut self, id: SessionId, bytes: &[u8]) -> Result<(), HarnessError> {
        let session = self.sessions.get_mut(&id).ok_or(HarnessError::UnknownSession(id))?;
        if session.receive(bytes).is_some() {
            self.rejected += 1;
        }
        Ok(())
    }

    fn believed_base(&self, m: &LimbMount) -> Isometry3<f64> {
        vehicle_iso(self.belief.x, self.belief.y, self.belief.z, self.belief.psi) * mount_iso(m)
    }

    fn true_base(&self, m: &LimbMount) -> Isometry3<f64> {
        vehicle_iso(self.truth.x, self.truth.y, self.truth.z, self.truth.psi) * mount_iso(m)
    }

    /// Recompute the derived quantities of a limb after its configuration or
    /// the vehicle moved.
    fn refresh_limb(&self, rt: &mut LimbRuntime) -> Result<(), HarnessError> {
        let geom = &self.sc.limbs.geometry;
        let tip = forward_kinematics(&rt.config, geom)?;
        if !rt.engaged {
            rt.target = self.believed_base(&rt.mount).transform_point(&Point3::from(tip.position)).coords;
        }
        let true_tip = self.true_base(&rt.mount).transform_point(&Point3::from(tip.position)).coords;
        // tactile force from the true surfaces, reported in the believed world frame
        let f_true = self.truth_env.spring_force(&true_tip, None);
        let body = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -self.truth.psi) * f_true;
        rt.contact = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.belief.psi) * body;
        let tendons = tendon_state(&rt.config, geom, self.sc.limbs.pretension, self.sc.limbs.tendon_stiffness)?;
        rt.tension = tendons.tension.iter().sum();
        Ok(())
    }

    fn start_plan(&mut self, plan: WaypointPlan) {
        self.los = LosState::starting_at(self.belief.x, self.belief.y);
        if let Some(z) = plan.waypoints[0].z {
            self.depth_target = z;
        }
        self.plan = Some(plan);
        self.guidance = GuidanceState::Following;
        self.autopilot = AutopilotState::default();
        self.last_los = None;
    }

    fn update_link(&mut self) -> Result<(), HarnessError> {
        let s = self.sc.environment.station;
        let (dx, dy, dz) = (self.truth.x - s[0], self.truth.y - s[1], self.truth.z);
        let horizontal = dx.hypot(dy);
        let geo = LinkGeometry {
            depth: self.truth.z,
            range: (horizontal * horizontal + dz * dz).sqrt(),
            // dorsal emitter points up; misalignment from the station bearing
            alignment: horizontal.atan2(dz).to_degrees(),
        };
        self.link = self.sc.links.select(self.mode.link, &geo)?;
        self.wireless = self.sc.links.wireless_available(&geo)?;
        Ok(())
    }

    fn link_status(&self) -> LinkStatus {
        LinkStatus { wireless_available: self.wireless }
    }

    fn apply_transition(&mut self, event: &TransitionEvent) -> Result<(), Rejection> {
        let out = request_transition(self.mode, event, &self.link_status())?;
        let was_teleop = self.mode.is_teleop();
        self.mode = out.state;
        self.hold = out.hold_position.then_some([self.belief.x, self.belief.y, self.belief.psi]);
        self.setpoint = [self.belief.x, self.belief.y, self.belief.psi];
        if event.source != TransitionSource::Fault {
            self.estop = false;
        }
        if self.mode.nav != NavMode::Mancon {
            self.fin_override = None;
            self.jet_cmd = (0.0, false, self.jet_cmd.2);
        }
        if was_teleop && !self.mode.is_teleop() {
            // limbs return to their stowed pose when teleoperation ends
            let ids: Vec<LimbId> = self.limbs.keys().copied().collect();
            for id in ids {
                let stow = self.stow_config(id);
                let rt = self.limbs.get_mut(&id).expect("key listed above");
                rt.engaged = false;
                rt.queue.clear();
                rt.haptic = Vector3::zeros();
                rt.config = stow;
            }
        }
        Ok(())
    }

    /// Execute one delivered command; the result becomes the ack or reject.
    fn apply_command(&mut self, cmd: &Command) -> Result<(), Rejection> {
        validate_command(self.mode, cmd)?;
        match &cmd.kind {
            CommandKind::ModeTransition { requested } => {
                let ev = TransitionEvent { requested: *requested, source: TransitionSource::Operator };
                self.apply_transition(&ev)?;
            }
            CommandKind::WaypointUpload { plan } => {
                self.hold = None;
                self.estop = false;
                self.start_plan(plan.clone());
            }
            CommandKind::FinOverride { fins } => {
                fin_wrench(fins, &self.sc.fins).map_err(|e| Rejection::new(ReasonCode::InvalidPayload, e.to_string()))?;
                self.fin_override = Some(fins.clone());
            }
            CommandKind::LimbMaster { limb, command } => {
                let rt = self
                    .limbs
                    .get_mut(limb)
                    .ok_or_else(|| Rejection::new(ReasonCode::UnknownTarget, format!("{limb:?} is not mounted")))?;
                rt.engaged = true;
                rt.queue.push_back(*command);
            }
            CommandKind::JetFire { pump, valve_open, nozzle_angle } => {
                self.jet_cmd = (*pump, *valve_open, *nozzle_angle);
            }
            CommandKind::EmergencyStop {} => {
                self.estop = true;
                self.fin_override = None;
                self.jet_cmd = (0.0, false, self.jet_cmd.2);
                for rt in self.limbs.values_mut() {
                    rt.queue.clear();
                }
            }
        }
        Ok(())
    }

    fn ingress(&mut self, out: &mut TickOutput) {
        let now = self.now_us();
        while self.script.front().is_some_and(|(at, _)| *at <= now) {
            let (_, cmd) = self.script.pop_front().expect("front exists");
            let msg = Message { seq: cmd.id, t: self.time(), body: Body::Command(cmd) };
            let bytes = encode(&msg).expect("script commands are finite");
            if let Some(s) = self.sessions.get_mut(&SCRIPT_SESSION) {
                s.receive(bytes.as_bytes());
            }
        }
        let mut sessions = std::mem::take(&mut self.sessions);
        let link = self.link;
        let t = self.time();
        for (id, session) in sessions.iter_mut() {
            let report = session.step(&link, self.dt_us, |cmd| {
                let mode = self.mode;
                self.apply_command(cmd).map(|_| {
                    self.pending_log.push(LoggedCommand { session: *id, t, mode, command: cmd.clone() });
                })
            });
            self.delivered += report.delivered.len();
            self.rejected += report.rejected.len();
            out.outbound.extend(report.transmitted.into_iter().map(|m| (*id, m)));
        }
        self.sessions = sessions;
    }

    fn raise_faults(&mut self, events: &[PowerEvent], power_faults: &[PowerFault]) {
        let mut now = BTreeSet::new();
        for f in power_faults {
            now.insert(match f {
                PowerFault::Overcurrent(s) => FaultFlag::Overcurrent { subsystem: *s },
                PowerFault::Undervoltage => FaultFlag::Undervoltage,
            });
        }
        for e in events {
            now.insert(match e {
                PowerEvent::PowerFail => FaultFlag::PowerFail,
                PowerEvent::Overload { .. } => FaultFlag::Overload,
            });
        }
        if self.power.soc <= 0.0 && self.power.source == crate::power::PowerSource::Battery {
            now.insert(FaultFlag::PowerFail);
        }
        if !self.link.available {
            now.insert(FaultFlag::LinkLost);
        }
        let fresh_power = now.iter().any(|f| *f != FaultFlag::LinkLost && !self.faults.contains(f));
        self.faults = now;
        if fresh_power {
            let ev = TransitionEvent { requested: self.mode, source: TransitionSource::Fault };
            let _ = self.apply_transition(&ev);
        }
    }

    fn teleop_step(&mut self) -> Result<(), HarnessError> {
        if !self.mode.permits_limbs() || self.shed(Subsystem::Limbs) {
            return Ok(());
        }
        let dt = self.haptic_div as f64 * self.sc.dt;
        let ids: Vec<LimbId> = self.limbs.iter().filter(|(_, rt)| rt.engaged).map(|(id, _)| *id).collect();
        for id in ids {
            let mut rt = self.limbs[&id].clone();
            let master = rt.queue.pop_front().unwrap_or(MasterCommand { increment: [0.0; 3], clutch: false, scale: 1.0 });
            let base = self.believed_base(&rt.mount);
            let state = TeleopState { target: rt.target, config: rt.config.clone() };
            let out = teleop_tick(&master, &state, &self.proxy, self.mode, &base, &self.sc.limbs.geometry, dt)?;
            rt.target = out.state.target;
            rt.config = out.state.config;
            rt.haptic = out.haptic;
            self.refresh_limb(&mut rt)?;
            let tip = forward_kinematics(&rt.config, &self.sc.limbs.geometry)?;
            let tip_world = base.transform_point(&Point3::from(tip.position)).coords;
            let tactile = TactileMeasurement { force: to3(&rt.contact), position: to3(&tip_world), t: self.time() };
            self.proxy = reconcile(&self.proxy, &tactile, &self.sc.teleop.reconcile)?;
            if id == LimbId::Camera {
                if let Some(light) = self.limbs.get(&LimbId::Light).cloned() {
                    let mut light = light;
                    light.config = mirror_config(&rt.config);
                    self.refresh_limb(&mut light)?;
                    self.limbs.insert(LimbId::Light, light);
                }
            }
            self.limbs.insert(id, rt);
        }
        Ok(())
    }

    fn shed(&self, s: Subsystem) -> bool {
        self.power.shed.contains(&s) || self.power.bus_voltage <= 0.0
    }

    /// Planar wrench and heave force requested by the active controller.
    fn control(&mut self, dt: f64) -> Result<(Wrench, f64), HarnessError> {
        let b = self.belief;
        let gains = self.sc.guidance;
        let mut tau = if let Some(hold) = self.hold {
            station_keeping(&b, hold, &gains.station)
        } else {
            match self.mode.nav {
                NavMode::Autnav => self.autonomous(dt),
                NavMode::Mancon => match &self.fin_override {
                    Some(_) => Wrench::ZERO,
                    None => station_keeping(&b, self.setpoint, &gains.station),
                },
                NavMode::Sautpos => {
                    let tasks: Vec<ReachTask> = self
                        .limbs
                        .values()
                        .filter(|rt| rt.engaged)
                        .map(|rt| ReachTask {
                            base: self.believed_base(&rt.mount),
                            length: self.sc.limbs.geometry.length,
                            target: rt.target,
                        })
                        .collect();
                    match sautpos_step(self.mode, &b, self.setpoint, &tasks, &gains.station) {
                        Ok(out) => {
                            self.setpoint = out.setpoint;
                            out.wrench
                        }
                        Err(_) => station_keeping(&b, self.setpoint, &gains.station),
                    }
                }
            }
        };
        let (z, i) = depth_control(self.depth_target, b.z, b.w, self.depth_integral, &gains.depth, dt);
        self.depth_integral = i;
        tau.z = 0.0;
        Ok((tau, z))
    }

    fn autonomous(&mut self, dt: f64) -> Wrench {
        let b = self.belief;
        let gains = self.sc.guidance;
        let Some(plan) = self.plan.as_ref().filter(|_| self.guidance == GuidanceState::Following) else {
            self.last_los = None;
            return station_keeping(&b, self.setpoint, &gains.station);
        };
        let (out, next) = los_step(&b, plan, &gains.los, &self.los, dt);
        self.los = next;
        let idx = out.active.min(plan.waypoints.len() - 1);
        if let Some(z) = plan.waypoints[idx].z {
            self.depth_target = z;
        }
        self.last_los = Some(GuidanceSummary {
            active: out.active,
            cross_track_error: out.cross_track_error,
            heading_cmd: out.heading,
            speed_cmd: out.speed,
            finished: out.finished,
        });
        if out.finished {
            let last = plan.waypoints[plan.waypoints.len() - 1];
            self.guidance = GuidanceState::Finished;
            self.setpoint = [last.x, last.y, out.heading];
            return station_keeping(&b, self.setpoint, &gains.station);
        }
        let (tau, ap) = autopilot(out.heading, out.speed, &b, &gains.autopilot, &self.autopilot, dt);
        self.autopilot = ap;
        tau
    }

    fn requested_loads(&self, fin_thrust: f64, z: f64) -> Loads {
        let m = &self.sc.power.loads;
        let comms = match self.link.kind {
            crate::comms::LinkKind::Umbilical => m.comms_umbilical_w,
            crate::comms::LinkKind::Vlc => m.comms_vlc_w,
            crate::comms::LinkKind::LteWifi => m.comms_lte_w,
        };
        let tension: f64 = self.limbs.values().map(|rt| rt.tension).sum();
        let mut loads = Loads::new();
        loads.insert(Subsystem::Computers, m.computers_w);
        loads.insert(Subsystem::Payload, m.payload_w);
        loads.insert(Subsystem::Comms, comms);
        loads.insert(
            Subsystem::Propulsion,
            m.propulsion_idle_w + m.propulsion_w_per_n * (fin_thrust + z.abs()) + m.pump_w_per_lps * self.jet.pump_rate,
        );
        loads.insert(Subsystem::Limbs, m.limbs_idle_w + m.limbs_w_per_n * tension);
        loads
    }

    /// Advance the whole system by one base tick.
    pub fn step(&mut self) -> Result<TickOutput, HarnessError> {
        let dt = self.sc.dt;
        let k = self.tick;
        let mut out = TickOutput::default();

        // sense and estimate
        let seed = self.sc.seed.wrapping_mul(1_000_003).wrapping_add(k);
        let frame = sense(&self.truth, self.sc.environment.current, &self.sc.landmarks, &self.sc.noise, seed);
        self.nav = predict(&self.nav, &frame, &self.sc.nav.params, dt);
        if k % self.sonar_div == 0 {
            self.nav = update(&self.nav, &frame.detections, &self.sc.landmarks, &self.sc.noise).0;
        }
        if k % self.gnss_div == 0 {
            if let Some(fix) = frame.gnss {
                self.nav = gnss_reset(&self.nav, fix, frame.depth, self.sc.noise.gnss).unwrap_or(self.nav);
            }
        }
        let depth = match self.sc.nav.depth_filter_tau {
            tau if tau > 0.0 && k > 0 => self.belief.z + (frame.depth - self.belief.z) * (dt / (tau + dt)),
            _ => frame.depth,
        };
        self.belief = VehicleState {
            x: self.nav.mean[0],
            y: self.nav.mean[1],
            psi: crate::math::wrap_angle(self.nav.mean[2]),
            z: depth,
            u: frame.dvl[0],
            v: frame.dvl[1],
            r: frame.yaw_rate,
            w: self.truth.w,
            t: self.truth.t,
        };

        // commands and the mode machine
        self.update_link()?;
        self.ingress(&mut out);
        if let Some(ev) = supervise(self.mode, &self.link_status()) {
            let _ = self.apply_transition(&ev);
        }

        // guidance / teleop
        if k % self.haptic_div == 0 {
            self.teleop_step()?;
        }
        let (tau, z) = self.control(dt)?;

        // allocation and propulsion
        let propulsion_off = self.estop || self.shed(Subsystem::Propulsion);
        let planar = if propulsion_off {
            self.fins = self.sc.fins.idle_fins();
            Wrench::ZERO
        } else if let (NavMode::Mancon, Some(fins), None) = (self.mode.nav, &self.fin_override, self.hold) {
            self.fins = fins.clone();
            fin_wrench(fins, &self.sc.fins)?
        } else {
            let alloc = allocate(&tau, &self.fins, &self.sc.fins)?;
            self.fins = alloc.commands;
            alloc.achieved
        };
        let (pump, valve, nozzle) = if propulsion_off { (0.0, false, self.jet_cmd.2) } else { self.jet_cmd };
        let jet = jet_step(&self.jet, pump, valve, nozzle, &self.sc.jet, dt);
        self.jet = jet.state;
        let heave = if propulsion_off { 0.0 } else { z };
        let total = Wrench { x: planar.x + jet.wrench.x, y: planar.y + jet.wrench.y, n: planar.n + jet.wrench.n, z: heave };

        // plant
        self.truth = step_dynamics(&self.truth, &total, &self.params, dt)?;
        let mut limbs = std::mem::take(&mut self.limbs);
        for rt in limbs.values_mut() {
            self.refresh_limb(rt)?;
        }
        self.limbs = limbs;

        // power
        let mut thrust = 0.0;
        for f in &self.fins {
            let (fx, fy) = fin_force(f, &self.sc.fins)?;
            thrust += fx.hypot(fy);
        }
        self.power.source = source_for(self.mode.link);
        let requested = self.requested_loads(thrust, heave);
        let (power, events) = step_power(&self.power, &requested, &self.sc.power.params, dt)?;
        self.power = power;
        let (monitor, faults) = detect_faults(&self.monitor, &self.power, &self.sc.power.params, dt);
        self.monitor = monitor;
        self.raise_faults(&events, &faults);

        // outgoing streams
        self.tick += 1;
        if self.tick % self.haptic_div == 0 && self.mode.permits_limbs() {
            let frames: Vec<HapticFrame> = self
                .limbs
                .iter()
                .filter(|(_, rt)| rt.engaged)
                .map(|(id, rt)| HapticFrame { limb: *id, force: to3(&rt.haptic), target: to3(&rt.target) })
                .collect();
            for f in frames {
                for s in self.sessions.values_mut() {
                    s.send(Body::Haptic(f))?;
                }
            }
        }
        if self.tick % self.telemetry_div == 0 {
            let frame = self.telemetry()?;
            for s in self.sessions.values_mut() {
                s.send(Body::Telemetry(Box::new(frame.clone())))?;
            }
            out.record = Some(LogRecord { t: self.time(), frame, commands: std::mem::take(&mut self.pending_log) });
        }
        Ok(out)
    }

    pub fn telemetry(&self) -> Result<TelemetryFrame, HarnessError> {
        let geom = &self.sc.limbs.geometry;
        let mut limbs = Vec::new();
        for (id, rt) in &self.limbs {
            let tip = forward_kinematics(&rt.config, geom)?;
            let tip_world = self.believed_base(&rt.mount).transform_point(&Point3::from(tip.position)).coords;
            limbs.push(LimbTelemetry {
                limb: *id,
                tip,
                tip_world: to3(&tip_world),
                tendons: tendon_state(&rt.config, geom, self.sc.limbs.pretension, self.sc.limbs.tendon_stiffness)?,
                contact_force: to3(&rt.contact),
                haptic_force: to3(&rt.haptic),
            });
        }
        Ok(TelemetryFrame {
            vehicle: self.truth,
            nav: NavSummary::from(&self.nav),
            mode: self.mode,
            hold_position: self.hold.is_some(),
            guidance: if self.mode.nav == NavMode::Autnav { self.last_los } else { None },
            limbs,
            power: PowerSummary {
                source: self.power.source,
                soc: self.power.soc,
                bus_voltage: self.power.bus_voltage,
                loads: self.power.loads.clone(),
                rolling_mean: self.power.rolling_mean,
                endurance: endurance_estimate(&self.power),
            },
            link: LinkReport {
                kind: self.link.kind,
                available: self.link.available,
                bandwidth_kbps: self.link.bandwidth_kbps,
                latency_ms: self.link.latency_ms,
            },
            faults: self.faults.iter().copied().collect(),
            proxy: self.proxy.patches.clone(),
        })
    }

    pub fn summary(&self, log: &ReplayLog) -> RunSummary {
        RunSummary {
            name: self.sc.name.clone(),
            ticks: self.tick,
            records: log.len(),
            digest: log.digest(),
            final_state: self.truth,
            final_mode: self.mode,
            delivered: self.delivered,
            rejected: self.rejected,
            soc: self.power.soc,
        }
    }
}

/// Proxy planes fitted to noisy samples of the true surfaces, as a prior
/// survey would produce them.
fn survey_proxy(sc: &Scenario) -> Result<ProxyEnvironment, HarnessError> {
    let base = ProxyBuildParams { viewpoint: None, ..sc.teleop.proxy };
    let mut proxy = ProxyEnvironment::empty(base.stiffness, base.damping);
    let env = &sc.environment;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5eed_5eed);
    let noise = Normal::new(0.0, env.sample_noise).expect("validated noise");
    for plane in &env.contact_planes {
        let Some(ext) = plane.extent else { continue };
        let (u, v) = in_plane_basis(&plane.normal);
        let mut samples = Vec::new();
        let nu = ((ext.u_max - ext.u_min) / env.sample_spacing).floor() as usize;
        let nv = ((ext.v_max - ext.v_min) / env.sample_spacing).floor() as usize;
        for i in 0..=nu {
            for j in 0..=nv {
                let pu = ext.u_min + i as f64 * env.sample_spacing;
                let pv = ext.v_min + j as f64 * env.sample_spacing;
                let p = plane.normal * (plane.offset + noise.sample(&mut rng)) + u * pu + v * pv;
                samples.push(p);
            }
        }
        let center = plane.normal * plane.offset + u * (0.5 * (ext.u_min + ext.u_max)) + v * (0.5 * (ext.v_min + ext.v_max));
        let params = ProxyBuildParams {
            viewpoint: Some(to3(&(center + plane.normal))),
            cluster_radius: base.cluster_radius.max(1.5 * env.sample_spacing),
            ..base
        };
        proxy = build_proxy(&samples, Some(&proxy), &params)?.proxy;
    }
    Ok(proxy)
}

/// Run a scenario headless to completion.
pub fn run_scenario(sc: Scenario) -> Result<(ReplayLog, RunSummary), HarnessError> {
    run_scenario_with(sc, |_| Ok(()))
}

/// Run headless, handing each record to `sink` as it is produced.
pub fn run_scenario_with<F>(sc: Scenario, mut sink: F) -> Result<(ReplayLog, RunSummary), HarnessError>
where
    F: FnMut(&LogRecord) -> Result<(), HarnessError>,
{
    let mut sim = Simulation::new(sc)?;
    let mut log = ReplayLog::new();
    while !sim.finished() {
        if let Some(record) = sim.step()?.record {
            sink(&record)?;
            log.push(record)?;
        }
    }
    let summary = sim.summary(&log);
    Ok((log, summary))
}
