//! Planar 3-DOF (surge, sway, yaw) rigid-body dynamics with an independent
//! heave channel.
//!
//! ```text
//! eta_dot = R(psi) * nu + current
//! M * nu_dot + C(nu) * nu + D(nu) * nu = tau
//! (m + Z_wdot) * w_dot = Z - (d_w + d_ww * |w|) * w
//! ```
//!
//! with `nu = [u, v, r]`, `M = M_rb + M_a` diagonal and `C` the skew
//! Coriolis-centripetal matrix built from `M`. Roll and pitch are not modelled.

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::wrap_angle;

/// Largest accepted integration step, s.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("time step {0} outside (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error("invalid vehicle parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleState {
    /// North position, m.
    pub x: f64,
    /// East position, m.
    pub y: f64,
    /// Depth, m (positive down).
    pub z: f64,
    /// Heading, rad in (-pi, pi].
    pub psi: f64,
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub w: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn at(x: f64, y: f64, z: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            z,
            psi: wrap_angle(psi),
            ..Default::default()
        }
    }

    pub fn nu(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.r)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.psi, self.u, self.v, self.r, self.w, self.t]
            .iter()
            .all(|f| f.is_finite())
    }

    /// Kinetic energy of the planar and heave motion, J.
    pub fn kinetic_energy(&self, params: &VehicleParams) -> f64 {
        let m = params.mass_matrix();
        let nu = self.nu();
        0.5 * nu.dot(&(m * nu)) + 0.5 * params.heave_mass() * self.w * self.w
    }

    /// Body velocities rotated into the north-east plane (no current).
    pub fn ground_velocity(&self) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (c * self.u - s * self.v, s * self.u + c * self.v)
    }
}

/// Generalized force on the vehicle in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wrench {
    /// Surge force, N.
    pub x: f64,
    /// Sway force, N.
    pub y: f64,
    /// Yaw moment, N m.
    pub n: f64,
    /// Heave force, N (positive down).
    pub z: f64,
}

impl Wrench {
    pub const ZERO: Wrench = Wrench { x: 0.0, y: 0.0, n: 0.0, z: 0.0 };

    pub fn planar(x: f64, y: f64, n: f64) -> Self {
        Self { x, y, n, z: 0.0 }
    }

    pub fn planar_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.n)
    }

    pub fn from_planar_vector(v: &Vector3<f64>) -> Self {
        Self::planar(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.n.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench {
            x: self.x + o.x,
            y: self.y + o.y,
            n: self.n + o.n,
            z: self.z + o.z,
        }
    }
}

/// Hydrodynamic and inertial parameters. Added-mass entries are stored as
/// positive magnitudes (`-X_udot` etc.). The defaults give a terminal surge
/// speed of about 1 m/s at 40 N, the combined output of four fins at full
/// stroke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    /// Yaw moment of inertia about the body z axis, kg m^2.
    pub yaw_inertia: f64,
    /// Added mass for (surge, sway, yaw, heave).
    pub added_mass: [f64; 4],
    /// Linear damping for (surge, sway, yaw, heave).
    pub linear_drag: [f64; 4],
    /// Quadratic damping for (surge, sway, yaw, heave).
    pub quadratic_drag: [f64; 4],
    /// Hull length excluding limbs, m.
    pub length: f64,
    pub max_depth: f64,
    /// Constant ambient current in the north-east plane, m/s.
    pub current: [f64; 2],
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 30.0,
            yaw_inertia: 3.6,
            added_mass: [3.0, 25.0, 1.5, 25.0],
            linear_drag: [10.0, 30.0, 5.0, 30.0],
            quadratic_drag: [30.0, 80.0, 5.0, 80.0],
            length: 1.2,
            max_depth: 100.0,
            current: [0.0, 0.0],
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |field, reason| Err(DynamicsError::InvalidParams { field, reason });
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass", "must be positive and finite");
        }
        if !(self.yaw_inertia > 0.0 && self.yaw_inertia.is_finite()) {
            return bad("yaw_inertia", "must be positive and finite");
        }
        if self.added_mass.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("added_mass", "entries must be non-negative and finite");
        }
        if self.linear_drag.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("linear_drag", "entries must be non-negative and finite");
        }
        if self.quadratic_drag.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("quadratic_drag", "entries must be non-negative and finite");
        }
        if !(self.length > 0.0) {
            return bad("length", "must be positive");
        }
        if !(self.max_depth > 0.0) {
            return bad("max_depth", "must be positive");
        }
        if self.current.iter().any(|c| !c.is_finite()) {
            return bad("current", "must be finite");
        }
        Ok(())
    }

    /// Rigid-body plus added mass for (u, v, r).
    pub fn mass_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.mass + self.added_mass[0],
            self.mass + self.added_mass[1],
            self.yaw_inertia + self.added_mass[2],
        ))
    }

    pub fn heave_mass(&self) -> f64 {
        self.mass + self.added_mass[3]
    }

    /// Coriolis-centripetal matrix of the decoupled planar model (centre of
    /// gravity at the body origin). Skew-symmetric, so it does no work.
    pub fn coriolis(&self, nu: &Vector3<f64>) -> Matrix3<f64> {
        let m11 = self.mass + self.added_mass[0];
        let m22 = self.mass + self.added_mass[1];
        let (u, v) = (nu[0], nu[1]);
        Matrix3::new(
            0.0, 0.0, -m22 * v, //
            0.0, 0.0, m11 * u, //
            m22 * v, -m11 * u, 0.0,
        )
    }

    /// Damping forces `D(nu) nu` for the planar DOFs.
    pub fn damping_force(&self, nu: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            (self.linear_drag[i] + self.quadratic_drag[i] * nu[i].abs()) * nu[i]
        })
    }

    pub fn heave_damping(&self, w: f64) -> f64 {
        (self.linear_drag[3] + self.quadratic_drag[3] * w.abs()) * w
    }

    /// Forces acting on the unactuated planar system, `-C(nu) nu - D(nu) nu`.
    pub fn free_force(&self, nu: &Vector3<f64>) -> Vector3<f64> {
        -(self.coriolis(nu) * nu) - self.damping_force(nu)
    }
}

// Internal state layout: [x, y, psi, u, v, r, z, w]
type StateVec = SVector<f64, 8>;

fn derivative(s: &StateVec, tau: &Wrench, p: &VehicleParams) -> StateVec {
    let (sin, cos) = s[2].sin_cos();
    let nu = Vector3::new(s[3], s[4], s[5]);
    let m = p.mass_matrix();
    let rhs = tau.planar_vector() + p.free_force(&nu);
    let mut d = StateVec::zeros();
    d[0] = cos * nu[0] - sin * nu[1] + p.current[0];
    d[1] = sin * nu[0] + cos * nu[1] + p.current[1];
    d[2] = nu[2];
    d[3] = rhs[0] / m[(0, 0)];
    d[4] = rhs[1] / m[(1, 1)];
    d[5] = rhs[2] / m[(2, 2)];
    d[6] = s[7];
    d[7] = (tau.z - p.heave_damping(s[7])) / p.heave_mass();
    d
}

/// Advance the vehicle by one RK4 step of length `dt`.
pub fn step_dynamics(
    state: &VehicleState,
    tau: &Wrench,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !tau.is_finite() {
        return Err(DynamicsError::NonFinite("wrench"));
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    params.validate()?;

    let s = StateVec::from_column_slice(&[
        state.x, state.y, state.psi, state.u, state.v, state.r, state.z, state.w,
    ]);
    let k1 = derivative(&s, tau, params);
    let k2 = derivative(&(s + k1 * (dt / 2.0)), tau, params);
    let k3 = derivative(&(s + k2 * (dt / 2.0)), tau, params);
    let k4 = derivative(&(s + k3 * dt), tau, params);
    let n = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    let mut next = VehicleState {
        x: n[0],
        y: n[1],
        psi: wrap_angle(n[2]),
        u: n[3],
        v: n[4],
        r: n[5],
        z: n[6],
        w: n[7],
        t: state.t + dt,
    };
    if next.z < 0.0 {
        next.z = 0.0;
        next.w = next.w.max(0.0);
    }
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite("integrated state"));
    }
    Ok(next)
}
