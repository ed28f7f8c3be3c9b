//! Guidance and low-level motion control.
//!
//! * Waypoint following with lookahead line-of-sight steering and an
//!   integral drift (crab angle) estimate.
//! * Trajectory tracking through the Udwadia-Kalaba constraint force with
//!   Baumgarte-style servo constraints.
//! * Heading/speed autopilot, depth loop and station keeping.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{VehicleState, Wrench};
use crate::math::{angle_diff, clamp_abs, wrap_angle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("inertia matrix is not symmetric positive definite")]
    NotSpd,
    #[error("constraint matrix must have 3 columns and match b (got {rows}x{cols}, b has {b_len})")]
    ConstraintShape { rows: usize, cols: usize, b_len: usize },
    #[error("non-finite constraint data")]
    NonFinite,
    #[error("time {t} outside reference domain [{start}, {end}]")]
    OutsideDomain { t: f64, start: f64, end: f64 },
    #[error("reference sample {index}: {reason}")]
    InconsistentReference { index: usize, reason: &'static str },
    #[error("waypoint plan: {0}")]
    InvalidPlan(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    /// Depth setpoint for the leg ending here, m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointPlan {
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_acceptance")]
    pub acceptance_radius: f64,
    #[serde(default = "default_cruise")]
    pub cruise_speed: f64,
}

fn default_acceptance() -> f64 {
    1.0
}

fn default_cruise() -> f64 {
    0.8
}

impl WaypointPlan {
    pub fn new(points: &[(f64, f64)]) -> Self {
        Self {
            waypoints: points.iter().map(|&(x, y)| Waypoint { x, y, z: None }).collect(),
            acceptance_radius: default_acceptance(),
            cruise_speed: default_cruise(),
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.waypoints.is_empty() {
            return Err(GuidanceError::InvalidPlan("needs at least one waypoint"));
        }
        if !(self.acceptance_radius > 0.0) {
            return Err(GuidanceError::InvalidPlan("acceptance_radius must be positive"));
        }
        if !(self.cruise_speed >= 0.0 && self.cruise_speed.is_finite()) {
            return Err(GuidanceError::InvalidPlan("cruise_speed must be non-negative"));
        }
        if self
            .waypoints
            .iter()
            .any(|w| !(w.x.is_finite() && w.y.is_finite() && w.z.map_or(true, |z| z >= 0.0)))
        {
            return Err(GuidanceError::InvalidPlan("waypoints must be finite with z >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LosParams {
    /// Lookahead distance, m.
    pub lookahead: f64,
    /// Drift adaptation gain, rad / (m s).
    pub adaptation_gain: f64,
    /// Anti-windup bound on the drift estimate, rad.
    pub max_drift: f64,
}

impl Default for LosParams {
    fn default() -> Self {
        Self { lookahead: 2.4, adaptation_gain: 0.04, max_drift: 0.6 }
    }
}

/// Mutable guidance state owned by the mission loop.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LosState {
    pub active: usize,
    pub leg_start: [f64; 2],
    /// Drift (crab angle) estimate, rad.
    pub drift_hat: f64,
}

impl LosState {
    pub fn starting_at(x: f64, y: f64) -> Self {
        Self { active: 0, leg_start: [x, y], drift_hat: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosOutput {
    pub heading: f64,
    pub speed: f64,
    pub active: usize,
    pub cross_track_error: f64,
    /// Azimuth of the active leg.
    pub leg_azimuth: f64,
    pub finished: bool,
}

/// Cross-track error of `(x, y)` relative to the line through `start` with
/// azimuth `alpha`, positive to starboard of the direction of travel.
pub fn cross_track_error(start: [f64; 2], alpha: f64, x: f64, y: f64) -> f64 {
    -(x - start[0]) * alpha.sin() + (y - start[1]) * alpha.cos()
}

/// One step of lookahead line-of-sight guidance.
///
/// `psi_d = alpha + atan(-e / lookahead) + drift_hat`; the drift estimate
/// integrates `-gamma * e` so that a persistent offset to starboard steers the
/// vehicle further to port.
pub fn los_step(
    state: &VehicleState,
    plan: &WaypointPlan,
    params: &LosParams,
    los: &LosState,
    dt: f64,
) -> (LosOutput, LosState) {
    let mut next = *los;
    let r2 = plan.acceptance_radius * plan.acceptance_radius;
    while let Some(wp) = plan.waypoints.get(next.active) {
        let d2 = (wp.x - state.x).powi(2) + (wp.y - state.y).powi(2);
        if d2 >= r2 {
            break;
        }
        next.leg_start = [wp.x, wp.y];
        next.active += 1;
    }
    let Some(wp) = plan.waypoints.get(next.active) else {
        let out = LosOutput {
            heading: state.psi,
            speed: 0.0,
            active: next.active,
            cross_track_error: 0.0,
            leg_azimuth: state.psi,
            finished: true,
        };
        return (out, next);
    };

    let (dx, dy) = (wp.x - next.leg_start[0], wp.y - next.leg_start[1]);
    let (alpha, e) = if dx == 0.0 && dy == 0.0 {
        ((wp.y - state.y).atan2(wp.x - state.x), 0.0)
    } else {
        let alpha = dy.atan2(dx);
        (alpha, cross_track_error(next.leg_start, alpha, state.x, state.y))
    };
    let heading = wrap_angle(alpha + (-e / params.lookahead).atan() + los.drift_hat);
    next.drift_hat =
        clamp_abs(los.drift_hat - params.adaptation_gain * e * dt, params.max_drift);
    let out = LosOutput {
        heading,
        speed: plan.cruise_speed,
        active: next.active,
        cross_track_error: e,
        leg_azimuth: alpha,
        finished: false,
    };
    (out, next)
}

fn spd_sqrt(m: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>), GuidanceError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GuidanceError::NotSpd);
    }
    let scale = m.norm().max(1e-300);
    if (m - m.transpose()).norm() > 1e-12 * scale {
        return Err(GuidanceError::NotSpd);
    }
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-14 * scale)) {
        return Err(GuidanceError::NotSpd);
    }
    let sqrt = eig.eigenvalues.map(f64::sqrt);
    let v = eig.eigenvectors;
    let half = v * Matrix3::from_diagonal(&sqrt) * v.transpose();
    let inv_half = v * Matrix3::from_diagonal(&sqrt.map(|s| 1.0 / s)) * v.transpose();
    Ok((half, inv_half))
}

/// Moore-Penrose inverse with singular values below `1e-10 * sigma_max` dropped.
fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * smax;
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let inv = svd.singular_values.map(|s| if s > tol && s > 0.0 { 1.0 / s } else { 0.0 });
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// Udwadia-Kalaba constraint force.
///
/// With `a = M^-1 tau_free`, returns
/// `Q_c = M^(1/2) pinv(A M^(-1/2)) (b - A a)`, the force of minimal
/// `M^-1`-norm that makes the constrained acceleration satisfy `A acc = b`
/// (in the least-squares sense when the constraints are inconsistent).
pub fn uk_force(
    m: &Matrix3<f64>,
    tau_free: &Vector3<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<Vector3<f64>, GuidanceError> {
    if a.ncols() != 3 || a.nrows() != b.len() {
        return Err(GuidanceError::ConstraintShape { rows: a.nrows(), cols: a.ncols(), b_len: b.len() });
    }
    if !(a.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())) {
        return Err(GuidanceError::NonFinite);
    }
    let (half, inv_half) = spd_sqrt(m)?;
    let m_inv = inv_half * inv_half;
    let free_acc = m_inv * tau_free;
    let free_acc = DVector::from_column_slice(free_acc.as_slice());
    let inv_half_d = DMatrix::from_column_slice(3, 3, inv_half.as_slice());
    let half_d = DMatrix::from_column_slice(3, 3, half.as_slice());
    let q = half_d * pinv(&(a * inv_half_d)) * (b - a * free_acc);
    Ok(Vector3::new(q[0], q[1], q[2]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefSample {
    /// (x, y, psi)
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedSample {
    pub t: f64,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub acc: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryRef {
    /// Counter-clockwise (north towards east) circle with tangent heading.
    Circle {
        center: [f64; 2],
        radius: f64,
        /// Angular rate, rad/s.
        rate: f64,
        phase: f64,
        duration: f64,
    },
    /// Samples with consistent derivatives, Hermite-interpolated.
    Sampled { samples: Vec<TimedSample> },
}

impl TrajectoryRef {
    pub fn domain(&self) -> (f64, f64) {
        match self {
            TrajectoryRef::Circle { duration, .. } => (0.0, *duration),
            TrajectoryRef::Sampled { samples } => (
                samples.first().map_or(0.0, |s| s.t),
                samples.last().map_or(0.0, |s| s.t),
            ),
        }
    }

    /// Check the sampled derivatives against finite differences of the
    /// samples (trapezoidal consistency, 1 % of the local scale).
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let TrajectoryRef::Sampled { samples } = self else {
            return Ok(());
        };
        if samples.len() < 2 {
            return Err(GuidanceError::InconsistentReference { index: 0, reason: "need 2 samples" });
        }
        for (i, w) in samples.windows(2).enumerate() {
            let dt = w[1].t - w[0].t;
            if !(dt > 0.0) {
                return Err(GuidanceError::InconsistentReference { index: i + 1, reason: "time not increasing" });
            }
            for k in 0..3 {
                let mut dp = w[1].pos[k] - w[0].pos[k];
                if k == 2 {
                    dp = wrap_angle(dp);
                }
                let fd = dp / dt;
                let mean_vel = 0.5 * (w[0].vel[k] + w[1].vel[k]);
                let scale = 1e-6 + w[0].vel[k].abs().max(w[1].vel[k].abs()) + dt * w[0].acc[k].abs().max(w[1].acc[k].abs());
                if (fd - mean_vel).abs() > 1e-2 * scale + 1e-9 {
                    return Err(GuidanceError::InconsistentReference { index: i + 1, reason: "position and velocity disagree" });
                }
                let fa = (w[1].vel[k] - w[0].vel[k]) / dt;
                let mean_acc = 0.5 * (w[0].acc[k] + w[1].acc[k]);
                let ascale = 1e-6 + w[0].acc[k].abs().max(w[1].acc[k].abs());
                if (fa - mean_acc).abs() > 1e-2 * ascale + 1e-6 {
                    return Err(GuidanceError::InconsistentReference { index: i + 1, reason: "velocity and acceleration disagree" });
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, t: f64) -> Result<RefSample, GuidanceError> {
        let (start, end) = self.domain();
        if !(t >= start && t <= end) {
            return Err(GuidanceError::OutsideDomain { t, start, end });
        }
        match self {
            TrajectoryRef::Circle { center, radius, rate, phase, .. } => {
                let th = phase + rate * t;
                let (s, c) = th.sin_cos();
                let pos = Vector3::new(center[0] + radius * c, center[1] + radius * s, wrap_angle(th + rate.signum() * std::f64::consts::FRAC_PI_2));
                let vel = Vector3::new(-radius * rate * s, radius * rate * c, *rate);
                let acc = Vector3::new(-radius * rate * rate * c, -radius * rate * rate * s, 0.0);
                Ok(RefSample { pos, vel, acc })
            }
            TrajectoryRef::Sampled { samples } => {
                let i = samples.partition_point(|s| s.t <= t).clamp(1, samples.len() - 1);
                let (a, b) = (&samples[i - 1], &samples[i]);
                let h = b.t - a.t;
                let tau = (t - a.t) / h;
                let (h00, h10, h01, h11) = (
                    2.0 * tau.powi(3) - 3.0 * tau.powi(2) + 1.0,
                    tau.powi(3) - 2.0 * tau.powi(2) + tau,
                    -2.0 * tau.powi(3) + 3.0 * tau.powi(2),
                    tau.powi(3) - tau.powi(2),
                );
                let mut pos = Vector3::zeros();
                let mut vel = Vector3::zeros();
                let mut acc = Vector3::zeros();
                for k in 0..3 {
                    let mut pb = b.pos[k];
                    if k == 2 {
                        pb = a.pos[k] + wrap_angle(b.pos[k] - a.pos[k]);
                    }
                    pos[k] = h00 * a.pos[k] + h10 * h * a.vel[k] + h01 * pb + h11 * h * b.vel[k];
                    vel[k] = a.vel[k] + tau * (b.vel[k] - a.vel[k]);
                    acc[k] = a.acc[k] + tau * (b.acc[k] - a.acc[k]);
                }
                pos[2] = wrap_angle(pos[2]);
                Ok(RefSample { pos, vel, acc })
            }
        }
    }
}

fn rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World-frame pose velocity `eta_dot = R(psi) nu`.
pub fn pose_velocity(state: &VehicleState) -> Vector3<f64> {
    rotation(state.psi) * state.nu()
}

/// Servo constraint on the world-frame pose acceleration,
/// `I * eta_ddot = acc_d + kd (vel_d - vel) + kp (pos_d - pos)`.
pub fn trajectory_constraints(
    state: &VehicleState,
    reference: &TrajectoryRef,
    t: f64,
    kp: f64,
    kd: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), GuidanceError> {
    let r = reference.sample(t)?;
    let vel = pose_velocity(state);
    let pos_err = Vector3::new(r.pos[0] - state.x, r.pos[1] - state.y, angle_diff(r.pos[2], state.psi));
    let b = r.acc + (r.vel - vel) * kd + pos_err * kp;
    Ok((DMatrix::identity(3, 3), DVector::from_column_slice(b.as_slice())))
}

/// Rewrite world-frame pose-acceleration constraints `A eta_ddot = b` on the
/// body accelerations `nu_dot`, using `eta_ddot = R nu_dot + r R S nu`.
pub fn body_constraints(
    state: &VehicleState,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let rot = rotation(state.psi);
    let rot_d = DMatrix::from_column_slice(3, 3, rot.as_slice());
    let coupling = rot * Vector3::new(-state.v, state.u, 0.0) * state.r;
    let coupling = DVector::from_column_slice(coupling.as_slice());
    (a * &rot_d, b - a * coupling)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutopilotGains {
    pub heading_kp: f64,
    pub heading_kd: f64,
    pub speed_kp: f64,
    pub speed_ki: f64,
    /// Surge force range, N.
    pub surge_min: f64,
    pub surge_max: f64,
    /// Yaw moment bound, N m.
    pub yaw_max: f64,
}

impl Default for AutopilotGains {
    fn default() -> Self {
        Self {
            heading_kp: 10.0,
            heading_kd: 8.0,
            speed_kp: 60.0,
            speed_ki: 40.0,
            surge_min: 0.0,
            surge_max: 40.0,
            yaw_max: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AutopilotState {
    pub speed_integral: f64,
}

/// PD heading and PI speed loops. Sway is left at zero.
pub fn autopilot(
    heading: f64,
    speed: f64,
    state: &VehicleState,
    gains: &AutopilotGains,
    ap: &AutopilotState,
    dt: f64,
) -> (Wrench, AutopilotState) {
    let e_psi = angle_diff(heading, state.psi);
    let n = clamp_abs(gains.heading_kp * e_psi - gains.heading_kd * state.r, gains.yaw_max);
    let e_u = speed - state.u;
    let x_raw = gains.speed_kp * e_u + ap.speed_integral;
    let x = x_raw.clamp(gains.surge_min, gains.surge_max);
    let mut next = *ap;
    // conditional integration: freeze when saturated in the same direction
    let saturated = (x_raw > gains.surge_max && e_u > 0.0) || (x_raw < gains.surge_min && e_u < 0.0);
    if !saturated {
        next.speed_integral = (ap.speed_integral + gains.speed_ki * e_u * dt)
            .clamp(gains.surge_min.min(0.0) - gains.surge_max, gains.surge_max);
    }
    (Wrench::planar(x, 0.0, n), next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub max_force: f64,
}

impl Default for DepthGains {
    fn default() -> Self {
        Self { kp: 40.0, ki: 4.0, kd: 60.0, max_force: 30.0 }
    }
}

/// Depth PID on the decoupled heave channel. Returns the heave force and
/// the new integrator value.
pub fn depth_control(target: f64, depth: f64, heave_rate: f64, integral: f64, gains: &DepthGains, dt: f64) -> (f64, f64) {
    let e = target - depth;
    let i = clamp_abs(integral + gains.ki * e * dt, gains.max_force);
    let z = clamp_abs(gains.kp * e + i - gains.kd * heave_rate, gains.max_force);
    (z, i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationGains {
    pub kp: f64,
    pub kd: f64,
    pub yaw_kp: f64,
    pub yaw_kd: f64,
    pub max_force: f64,
    pub max_moment: f64,
}

impl Default for StationGains {
    fn default() -> Self {
        Self { kp: 20.0, kd: 40.0, yaw_kp: 10.0, yaw_kd: 8.0, max_force: 20.0, max_moment: 10.0 }
    }
}

/// Body-frame PD wrench towards the pose `(x, y, psi)`.
pub fn station_keeping(state: &VehicleState, setpoint: [f64; 3], gains: &StationGains) -> Wrench {
    let (s, c) = state.psi.sin_cos();
    let (ex, ey) = (setpoint[0] - state.x, setpoint[1] - state.y);
    let (bx, by) = (c * ex + s * ey, -s * ex + c * ey);
    let x = clamp_abs(gains.kp * bx - gains.kd * state.u, gains.max_force);
    let y = clamp_abs(gains.kp * by - gains.kd * state.v, gains.max_force);
    let n = clamp_abs(
        gains.yaw_kp * angle_diff(setpoint[2], state.psi) - gains.yaw_kd * state.r,
        gains.max_moment,
    );
    Wrench::planar(x, y, n)
}
