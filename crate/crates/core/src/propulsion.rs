//! Fin and jet propulsion.
//!
//! Fins are modelled by their cycle-averaged thrust
//! `T = k_t * eta * amplitude^2 * frequency^2`, directed along the swivel
//! angle in the body plane (0 = forward, +pi/2 = starboard). A fin can point
//! anywhere in the forward half-plane, so each fin's force lies in a half-disk
//! of radius `T_max`. The jet is a charge/vent device: the pump fills the
//! elastic mantle while the valve is closed, and an open valve discharges it
//! through the nozzle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::dynamics::Wrench;

const SWIVEL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropulsionError {
    #[error("fin {0:?} has no mount in the fin parameters")]
    UnknownFin(FinId),
    #[error("fin {id:?}: {reason}")]
    InvalidFin { id: FinId, reason: &'static str },
    #[error("allocation needs at least 4 fins, got {0}")]
    TooFewFins(usize),
    #[error("invalid propulsion parameter `{0}`")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinId {
    BowPort,
    BowStbd,
    SternPort,
    SternStbd,
    CentralPort,
    CentralStbd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinMode {
    /// Flapping, standing wave.
    #[serde(rename = "SW")]
    StandingWave,
    /// Undulating, traveling wave.
    #[serde(rename = "TW")]
    TravelingWave,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinState {
    pub id: FinId,
    /// Thrust direction in the body plane, rad in [-pi/2, pi/2].
    pub swivel: f64,
    pub mode: FinMode,
    /// Stroke amplitude, rad.
    pub amplitude: f64,
    /// Stroke frequency, Hz.
    pub frequency: f64,
    pub phase: f64,
}

impl FinState {
    pub fn idle(id: FinId) -> Self {
        Self {
            id,
            swivel: 0.0,
            mode: FinMode::StandingWave,
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinMount {
    pub id: FinId,
    /// Lever arm in the body frame, m (x forward, y starboard).
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinParams {
    /// Thrust coefficient k_t, N / (rad^2 Hz^2).
    pub thrust_coeff: f64,
    /// Traveling-wave efficiency factor relative to standing wave.
    pub tw_efficiency: f64,
    pub amplitude_max: f64,
    pub frequency_max: f64,
    pub mounts: Vec<FinMount>,
}

impl Default for FinParams {
    fn default() -> Self {
        Self {
            thrust_coeff: 2.5,
            tw_efficiency: 1.2,
            amplitude_max: 0.5,
            frequency_max: 4.0,
            mounts: vec![
                FinMount { id: FinId::BowPort, x: 0.35, y: -0.15 },
                FinMount { id: FinId::BowStbd, x: 0.35, y: 0.15 },
                FinMount { id: FinId::SternPort, x: -0.35, y: -0.15 },
                FinMount { id: FinId::SternStbd, x: -0.35, y: 0.15 },
            ],
        }
    }
}

impl FinParams {
    pub fn validate(&self) -> Result<(), PropulsionError> {
        for (v, name) in [
            (self.thrust_coeff, "thrust_coeff"),
            (self.tw_efficiency, "tw_efficiency"),
            (self.amplitude_max, "amplitude_max"),
            (self.frequency_max, "frequency_max"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PropulsionError::InvalidParams(name));
            }
        }
        let mut ids: Vec<FinId> = self.mounts.iter().map(|m| m.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.mounts.len() {
            return Err(PropulsionError::InvalidParams("mounts"));
        }
        Ok(())
    }

    pub fn mount(&self, id: FinId) -> Option<&FinMount> {
        self.mounts.iter().find(|m| m.id == id)
    }

    pub fn mode_factor(&self, mode: FinMode) -> f64 {
        match mode {
            FinMode::StandingWave => 1.0,
            FinMode::TravelingWave => self.tw_efficiency,
        }
    }

    /// Largest thrust a fin can produce in `mode`.
    pub fn max_thrust(&self, mode: FinMode) -> f64 {
        fin_thrust(self, mode, self.amplitude_max, self.frequency_max)
    }

    /// Idle fin states for every mounted fin.
    pub fn idle_fins(&self) -> Vec<FinState> {
        self.mounts.iter().map(|m| FinState::idle(m.id)).collect()
    }
}

fn fin_thrust(params: &FinParams, mode: FinMode, amplitude: f64, frequency: f64) -> f64 {
    params.thrust_coeff * params.mode_factor(mode) * amplitude * amplitude * frequency * frequency
}

fn check_fin<'a>(fin: &FinState, params: &'a FinParams) -> Result<&'a FinMount, PropulsionError> {
    let mount = params.mount(fin.id).ok_or(PropulsionError::UnknownFin(fin.id))?;
    let invalid = |reason| Err(PropulsionError::InvalidFin { id: fin.id, reason });
    if !(fin.swivel.abs() <= FRAC_PI_2 + SWIVEL_TOL) {
        return invalid("swivel outside +/- pi/2");
    }
    if !(fin.frequency >= 0.0 && fin.frequency.is_finite()) {
        return invalid("frequency must be non-negative");
    }
    if !(fin.amplitude >= 0.0 && fin.amplitude <= params.amplitude_max) {
        return invalid("amplitude outside [0, amplitude_max]");
    }
    if !fin.phase.is_finite() {
        return invalid("phase must be finite");
    }
    Ok(mount)
}

/// Cycle-averaged thrust magnitude of one fin, N.
pub fn thrust_magnitude(fin: &FinState, params: &FinParams) -> f64 {
    fin_thrust(params, fin.mode, fin.amplitude, fin.frequency)
}

/// Body-frame force (X, Y) of a single fin.
pub fn fin_force(fin: &FinState, params: &FinParams) -> Result<(f64, f64), PropulsionError> {
    check_fin(fin, params)?;
    let t = thrust_magnitude(fin, params);
    let (s, c) = fin.swivel.sin_cos();
    Ok((t * c, t * s))
}

/// Sum of the cycle-averaged fin forces and their yaw moments.
pub fn fin_wrench(fins: &[FinState], params: &FinParams) -> Result<Wrench, PropulsionError> {
    let mut w = Wrench::ZERO;
    for fin in fins {
        let mount = check_fin(fin, params)?;
        let (fx, fy) = fin_force(fin, params)?;
        w.x += fx;
        w.y += fy;
        w.n += mount.x * fy - mount.y * fx;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub commands: Vec<FinState>,
    pub achieved: Wrench,
    /// The request could not be met within the fin limits.
    pub saturated: bool,
}

/// Project a fin force onto its feasible half-disk `{fx >= 0, |f| <= t_max}`.
fn project_half_disk(fx: f64, fy: f64, t_max: f64) -> (f64, f64) {
    if fx < 0.0 {
        return (0.0, fy.clamp(-t_max, t_max));
    }
    let norm = fx.hypot(fy);
    if norm > t_max {
        let k = t_max / norm;
        (fx * k, fy * k)
    } else {
        (fx, fy)
    }
}

/// Extended-thrust effectiveness matrix: columns `(fx_i, fy_i)` per fin.
fn effectiveness(mounts: &[FinMount]) -> DMatrix<f64> {
    let n = mounts.len();
    let mut b = DMatrix::zeros(3, 2 * n);
    for (i, m) in mounts.iter().enumerate() {
        b[(0, 2 * i)] = 1.0;
        b[(1, 2 * i + 1)] = 1.0;
        b[(2, 2 * i)] = -m.y;
        b[(2, 2 * i + 1)] = m.x;
    }
    b
}

/// Weight of the yaw row in the saturated least-squares problem, 1/m.
const YAW_WEIGHT: f64 = 4.0;

/// Distribute a desired planar wrench over the fins.
///
/// The minimum-norm pseudo-inverse solution is used when it respects every
/// fin's half-disk; otherwise the constrained least-squares problem
/// `min |B f - tau|` is solved by accelerated projected gradient starting from
/// the projected pseudo-inverse solution. Fin modes are kept from `fins`;
/// each commanded magnitude is realised at full amplitude by choosing the
/// stroke frequency. The heave component of `tau_desired` is ignored.
pub fn allocate(
    tau_desired: &Wrench,
    fins: &[FinState],
    params: &FinParams,
) -> Result<Allocation, PropulsionError> {
    if fins.len() < 4 {
        return Err(PropulsionError::TooFewFins(fins.len()));
    }
    let mounts: Vec<FinMount> = fins
        .iter()
        .map(|f| params.mount(f.id).copied().ok_or(PropulsionError::UnknownFin(f.id)))
        .collect::<Result<_, _>>()?;
    let limits: Vec<f64> = fins.iter().map(|f| params.max_thrust(f.mode)).collect();
    let b = effectiveness(&mounts);
    let tau = DVector::from_column_slice(&[tau_desired.x, tau_desired.y, tau_desired.n]);

    let pinv = b
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|_| PropulsionError::InvalidParams("mounts"))?;
    let mut f = &pinv * &tau;

    let feasible = (0..fins.len()).all(|i| {
        let (fx, fy) = (f[2 * i], f[2 * i + 1]);
        fx >= -1e-12 && fx.hypot(fy) <= limits[i] * (1.0 + 1e-12)
    });
    let project = |v: &mut DVector<f64>| {
        for i in 0..limits.len() {
            let (fx, fy) = project_half_disk(v[2 * i], v[2 * i + 1], limits[i]);
            v[2 * i] = fx;
            v[2 * i + 1] = fy;
        }
    };
    project(&mut f);
    if !feasible {
        // yaw moment is weighted up so heading authority survives saturation
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1.0, YAW_WEIGHT]));
        f = projected_least_squares(&(&w * &b), &(&w * &tau), f, project);
    }

    let commands: Vec<FinState> = fins
        .iter()
        .enumerate()
        .map(|(i, fin)| {
            let (fx, fy) = (f[2 * i], f[2 * i + 1]);
            let t = fx.hypot(fy);
            let mut cmd = *fin;
            if t <= 0.0 {
                cmd.amplitude = 0.0;
                cmd.frequency = 0.0;
            } else {
                cmd.swivel = fy.atan2(fx).clamp(-FRAC_PI_2, FRAC_PI_2);
                cmd.amplitude = params.amplitude_max;
                let per_hz2 = params.thrust_coeff * params.mode_factor(fin.mode) * cmd.amplitude.powi(2);
                cmd.frequency = (t / per_hz2).sqrt().min(params.frequency_max);
            }
            cmd
        })
        .collect();
    let achieved = fin_wrench(&commands, params)?;
    let residual = (achieved.planar_vector() - tau_desired.planar_vector()).norm();
    let saturated = residual > 1e-6 * tau_desired.planar_vector().norm().max(1.0);
    Ok(Allocation { commands, achieved, saturated })
}

fn projected_least_squares(
    b: &DMatrix<f64>,
    tau: &DVector<f64>,
    start: DVector<f64>,
    project: impl Fn(&mut DVector<f64>),
) -> DVector<f64> {
    let bt = b.transpose();
    let btb = &bt * b;
    let btt = &bt * tau;
    let lipschitz = btb.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lipschitz;
    let objective = |f: &DVector<f64>| (b * f - tau).norm_squared();

    let mut x = start.clone();
    let mut y = start;
    let mut momentum = 1.0_f64;
    let mut best = x.clone();
    let mut best_obj = objective(&x);
    let mut checkpoint = best_obj;
    for it in 0..20_000 {
        let grad = &btb * &y - &btt;
        let mut next = &y - grad * step;
        project(&mut next);
        let obj = objective(&next);
        // restart momentum when the objective goes up
        if obj > objective(&x) {
            if momentum == 1.0 {
                // a plain projected step no longer descends: converged
                break;
            }
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &next + (&next - &x) * ((momentum - 1.0) / next_momentum);
        let moved = (&next - &x).norm();
        x = next;
        momentum = next_momentum;
        if obj < best_obj {
            best_obj = obj;
            best = x.clone();
        }
        if best_obj < 1e-22 || moved < 1e-11 * (1.0 + x.norm()) {
            break;
        }
        if it % 50 == 49 {
            if checkpoint - best_obj <= 1e-10 * (1.0 + best_obj) {
                break;
            }
            checkpoint = best_obj;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetState {
    /// Water stored in the mantle, L.
    pub stored_volume: f64,
    /// Gauge pressure between mantle and pen, kPa.
    pub pressure: f64,
    pub valve_open: bool,
    /// Nozzle direction in the body plane, rad (0 = thrust forward).
    pub nozzle_angle: f64,
    /// Pump flow actually applied on the last step, L/s.
    pub pump_rate: f64,
}

impl Default for JetState {
    fn default() -> Self {
        Self {
            stored_volume: 0.0,
            pressure: 0.0,
            valve_open: false,
            nozzle_angle: 0.0,
            pump_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JetParams {
    /// Mantle capacity, L.
    pub capacity: f64,
    /// Elastic mantle constant, kPa per L.
    pub elastic_constant: f64,
    /// Discharge coefficient, (L/s) per sqrt(kPa).
    pub discharge_coeff: f64,
    /// Thrust per squared outflow, N / (L/s)^2.
    pub thrust_factor: f64,
    pub pump_max: f64,
    pub nozzle_max_angle: f64,
    /// Nozzle lever arm (x, y), m.
    pub mount: [f64; 2],
}

impl Default for JetParams {
    fn default() -> Self {
        Self {
            capacity: 2.0,
            elastic_constant: 50.0,
            discharge_coeff: 0.4,
            thrust_factor: 3.2,
            pump_max: 0.5,
            nozzle_max_angle: std::f64::consts::FRAC_PI_4,
            mount: [0.1, 0.0],
        }
    }
}

impl JetParams {
    pub fn validate(&self) -> Result<(), PropulsionError> {
        for (v, name) in [
            (self.capacity, "capacity"),
            (self.elastic_constant, "elastic_constant"),
            (self.discharge_coeff, "discharge_coeff"),
            (self.thrust_factor, "thrust_factor"),
            (self.pump_max, "pump_max"),
            (self.nozzle_max_angle, "nozzle_max_angle"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PropulsionError::InvalidParams(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JetStep {
    pub state: JetState,
    /// Step-averaged jet wrench.
    pub wrench: Wrench,
    /// Volume pumped in during the step, L.
    pub pumped: f64,
    /// Volume expelled during the step, L.
    pub expelled: f64,
}

/// Advance the mantle by `dt`.
///
/// With the valve open the outflow `Q = c_d sqrt(k_p V)` gives
/// `d sqrt(V)/dt = -c_d sqrt(k_p) / 2`, which is integrated exactly over the
/// step, so the returned wrench carries the exact impulse of the step.
pub fn jet_step(
    jet: &JetState,
    pump_cmd: f64,
    valve_cmd: bool,
    nozzle_cmd: f64,
    params: &JetParams,
    dt: f64,
) -> JetStep {
    let pump = if pump_cmd.is_finite() { pump_cmd.clamp(0.0, params.pump_max) } else { 0.0 };
    let nozzle = if nozzle_cmd.is_finite() {
        nozzle_cmd.clamp(-params.nozzle_max_angle, params.nozzle_max_angle)
    } else {
        jet.nozzle_angle
    };
    let volume = jet.stored_volume.clamp(0.0, params.capacity);
    let mut next = JetState {
        stored_volume: volume,
        pressure: 0.0,
        valve_open: valve_cmd,
        nozzle_angle: nozzle,
        pump_rate: 0.0,
    };
    let mut wrench = Wrench::ZERO;
    let (mut pumped, mut expelled) = (0.0, 0.0);

    if !valve_cmd {
        let filled = (volume + pump * dt).min(params.capacity);
        pumped = filled - volume;
        next.stored_volume = filled;
        next.pump_rate = if dt > 0.0 { pumped / dt } else { 0.0 };
    } else if volume > 0.0 && dt > 0.0 {
        let a = params.discharge_coeff * params.elastic_constant.sqrt();
        let s0 = volume.sqrt();
        let t_empty = 2.0 * s0 / a;
        let tau = dt.min(t_empty);
        let s1 = if tau >= t_empty { 0.0 } else { (s0 - 0.5 * a * tau).max(0.0) };
        let remaining = s1 * s1;
        // impulse = f * c_d^2 * k_p * integral of V(t) dt
        let gain = params.thrust_factor * params.discharge_coeff.powi(2) * params.elastic_constant;
        let impulse = gain * 2.0 * (s0.powi(3) - s1.powi(3)) / (3.0 * a);
        let thrust = impulse / dt;
        let (s, c) = nozzle.sin_cos();
        let (fx, fy) = (thrust * c, thrust * s);
        wrench = Wrench::planar(fx, fy, params.mount[0] * fy - params.mount[1] * fx);
        expelled = volume - remaining;
        next.stored_volume = remaining;
    }
    next.pressure = params.elastic_constant * next.stored_volume;
    JetStep { state: next, wrench, pumped, expelled }
}
