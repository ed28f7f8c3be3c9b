//! Tapered, four-tendon continuum limbs.
//!
//! Each limb is a chain of constant-curvature arcs. Segment `j` bends with
//! curvature `kappa_j` in the plane at azimuth `phi_j` about the limb axis.
//! The limb base frame has `z` along the straight limb; `x-z` is the
//! vehicle's sagittal plane. Tendons run at azimuths 0, 90, 180 and 270 deg at
//! a fixed fraction of the local radius.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

use crate::contact::ProxyEnvironment;
use crate::math::{sinc, wrap_angle};

pub const N_TENDONS: usize = 4;
/// Damping factor of the inverse-kinematics iteration.
pub const IK_DAMPING: f64 = 1e-3;
pub const IK_TOLERANCE: f64 = 1e-4;
pub const IK_MAX_ITERATIONS: usize = 200;

/// The four limbs of the vehicle. The light tentacle mirrors the camera one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimbId {
    ArmPort,
    ArmStbd,
    Camera,
    Light,
}

impl LimbId {
    pub const ALL: [LimbId; 4] = [LimbId::ArmPort, LimbId::ArmStbd, LimbId::Camera, LimbId::Light];

    /// Limbs that accept master commands directly.
    pub fn is_commandable(&self) -> bool {
        *self != LimbId::Light
    }
}
const FD_STEP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimbError {
    #[error("segment {segment}: |kappa| = {kappa} exceeds the limit {limit}")]
    CurvatureLimit { segment: usize, kappa: f64, limit: f64 },
    #[error("configuration has {got} segments, geometry expects {expected}")]
    SegmentCount { got: usize, expected: usize },
    #[error("non-finite value in segment {0}")]
    NonFinite(usize),
    #[error("target at distance {distance:.4} m is beyond the limb length {length} m")]
    Unreachable { distance: f64, length: f64 },
    #[error("invalid limb geometry: {0}")]
    InvalidGeometry(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimbGeometry {
    pub length: f64,
    pub base_radius: f64,
    pub tip_radius: f64,
    pub n_segments: usize,
    /// Tendon offset as a fraction of the local radius.
    pub tendon_offset_ratio: f64,
    /// Curvature limit, 1/m. Defaults to one full turn over the limb length.
    pub kappa_max: Option<f64>,
}

impl Default for LimbGeometry {
    fn default() -> Self {
        Self {
            length: 0.6,
            base_radius: 0.03,
            tip_radius: 0.01,
            n_segments: 6,
            tendon_offset_ratio: 0.75,
            kappa_max: None,
        }
    }
}

impl LimbGeometry {
    /// The half-length limbs deployed on the first prototype.
    pub fn half_scale() -> Self {
        Self {
            length: 0.3,
            base_radius: 0.015,
            tip_radius: 0.005,
            ..Self::default()
        }
    }

    pub fn kappa_limit(&self) -> f64 {
        self.kappa_max.unwrap_or(TAU / self.length)
    }

    pub fn segment_length(&self) -> f64 {
        self.length / self.n_segments as f64
    }

    /// Outer radius at arc length `s` from the base (linear taper).
    pub fn radius_at(&self, s: f64) -> f64 {
        self.base_radius - (self.base_radius - self.tip_radius) * s / self.length
    }

    /// Angular station of tendon `i`.
    pub fn tendon_station(i: usize) -> f64 {
        i as f64 * std::f64::consts::FRAC_PI_2
    }

    pub fn validate(&self) -> Result<(), LimbError> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(LimbError::InvalidGeometry("length must be positive"));
        }
        if !(self.base_radius > self.tip_radius && self.tip_radius > 0.0) {
            return Err(LimbError::InvalidGeometry("need base_radius > tip_radius > 0"));
        }
        if self.n_segments == 0 {
            return Err(LimbError::InvalidGeometry("n_segments must be at least 1"));
        }
        if !(self.tendon_offset_ratio > 0.0 && self.tendon_offset_ratio <= 1.0) {
            return Err(LimbError::InvalidGeometry("tendon_offset_ratio must be in (0, 1]"));
        }
        if !(self.kappa_limit() > 0.0) {
            return Err(LimbError::InvalidGeometry("kappa_max must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// Curvature, 1/m.
    pub kappa: f64,
    /// Bending-plane azimuth, rad.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbConfig {
    pub segments: Vec<Segment>,
}

impl LimbConfig {
    pub fn straight(n_segments: usize) -> Self {
        Self { segments: vec![Segment::default(); n_segments] }
    }

    pub fn uniform(n_segments: usize, kappa: f64, phi: f64) -> Self {
        Self { segments: vec![Segment { kappa, phi }; n_segments] }
    }

    pub fn validate(&self, geom: &LimbGeometry) -> Result<(), LimbError> {
        if self.segments.len() != geom.n_segments {
            return Err(LimbError::SegmentCount {
                got: self.segments.len(),
                expected: geom.n_segments,
            });
        }
        let limit = geom.kappa_limit();
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.kappa.is_finite() && s.phi.is_finite()) {
                return Err(LimbError::NonFinite(i));
            }
            if s.kappa.abs() > limit * (1.0 + 1e-12) {
                return Err(LimbError::CurvatureLimit { segment: i, kappa: s.kappa, limit });
            }
        }
        Ok(())
    }

    /// Cartesian curvature components `(kappa cos phi, kappa sin phi)` per
    /// segment, the smooth parameterisation used by the IK.
    fn to_components(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.segments.len(),
            self.segments
                .iter()
                .flat_map(|s| [s.kappa * s.phi.cos(), s.kappa * s.phi.sin()]),
        )
    }

    fn from_components(q: &DVector<f64>) -> Self {
        let segments = q
            .as_slice()
            .chunks(2)
            .map(|c| {
                let kappa = c[0].hypot(c[1]);
                let phi = if kappa == 0.0 { 0.0 } else { c[1].atan2(c[0]) };
                Segment { kappa, phi }
            })
            .collect();
        Self { segments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TipPose {
    /// Tip position in the limb base frame, m.
    pub position: Vector3<f64>,
    /// Unit tangent at the tip.
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TendonState {
    /// Length change relative to the straight limb, m (negative = shortened).
    pub length_change: [f64; N_TENDONS],
    /// Tension, N (never negative).
    pub tension: [f64; N_TENDONS],
}

/// Transform of one constant-curvature arc of length `s`.
fn segment_transform(seg: &Segment, s: f64) -> (Rotation3<f64>, Vector3<f64>) {
    let theta = seg.kappa * s;
    let (sp, cp) = seg.phi.sin_cos();
    // (1 - cos theta) / kappa and sin theta / kappa without dividing by kappa
    let half = sinc(0.5 * theta);
    let radial = 0.5 * seg.kappa * s * s * half * half;
    let axial = s * sinc(theta);
    let p = Vector3::new(radial * cp, radial * sp, axial);
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), seg.phi)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), theta)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), -seg.phi);
    (rot, p)
}

fn chain(config: &LimbConfig, geom: &LimbGeometry) -> (Rotation3<f64>, Vector3<f64>) {
    let s = geom.segment_length();
    let mut rot = Rotation3::identity();
    let mut pos = Vector3::zeros();
    for seg in &config.segments {
        let (r, p) = segment_transform(seg, s);
        pos += rot * p;
        rot *= r;
    }
    (rot, pos)
}

/// Tip pose of a piecewise-constant-curvature limb.
pub fn forward_kinematics(config: &LimbConfig, geom: &LimbGeometry) -> Result<TipPose, LimbError> {
    config.validate(geom)?;
    let (rot, position) = chain(config, geom);
    Ok(TipPose { position, direction: rot * Vector3::z() })
}

/// Tendon length changes, `dl_i = -sum_j r_j kappa_j cos(phi_j - beta_i) s_j`.
///
/// The opposing-pair cosines are formed from a single `sin`/`cos` of `phi_j`,
/// so `dl_0 + dl_2` and `dl_1 + dl_3` vanish exactly.
pub fn tendon_lengths(config: &LimbConfig, geom: &LimbGeometry) -> Result<[f64; N_TENDONS], LimbError> {
    config.validate(geom)?;
    let s = geom.segment_length();
    let mut dl = [0.0; N_TENDONS];
    for (j, seg) in config.segments.iter().enumerate() {
        let r = geom.tendon_offset_ratio * geom.radius_at((j as f64 + 0.5) * s);
        let (sp, cp) = seg.phi.sin_cos();
        let base = r * seg.kappa * s;
        // cos(phi - beta_i) for beta = 0, 90, 180, 270 deg
        let c = [cp, sp, -cp, -sp];
        for i in 0..N_TENDONS {
            dl[i] -= base * c[i];
        }
    }
    Ok(dl)
}

/// Telemetry tensions: pretension plus a linear tendon spring on shortening.
pub fn tendon_state(
    config: &LimbConfig,
    geom: &LimbGeometry,
    pretension: f64,
    tendon_stiffness: f64,
) -> Result<TendonState, LimbError> {
    let length_change = tendon_lengths(config, geom)?;
    let mut tension = [0.0; N_TENDONS];
    for i in 0..N_TENDONS {
        tension[i] = (pretension + tendon_stiffness * (-length_change[i]).max(0.0)).max(0.0);
    }
    Ok(TendonState { length_change, tension })
}

fn position_from_components(q: &DVector<f64>, geom: &LimbGeometry) -> Vector3<f64> {
    chain(&LimbConfig::from_components(q), geom).1
}

/// Forward-difference Jacobian of the tip position with respect to the
/// Cartesian curvature components `(kappa_j cos phi_j, kappa_j sin phi_j)`.
pub fn position_jacobian(config: &LimbConfig, geom: &LimbGeometry) -> DMatrix<f64> {
    jacobian_at(&config.to_components(), geom, FD_STEP)
}

fn jacobian_at(q: &DVector<f64>, geom: &LimbGeometry, h: f64) -> DMatrix<f64> {
    let p0 = position_from_components(q, geom);
    let mut j = DMatrix::zeros(3, q.len());
    let mut qh = q.clone();
    for c in 0..q.len() {
        qh[c] += h;
        let d = (position_from_components(&qh, geom) - p0) / h;
        j.set_column(c, &d);
        qh[c] = q[c];
    }
    j
}

/// Central-difference Jacobian, used as a reference for `position_jacobian`.
pub fn position_jacobian_central(config: &LimbConfig, geom: &LimbGeometry, h: f64) -> DMatrix<f64> {
    let q = config.to_components();
    let mut j = DMatrix::zeros(3, q.len());
    let mut qh = q.clone();
    for c in 0..q.len() {
        qh[c] = q[c] + h;
        let plus = position_from_components(&qh, geom);
        qh[c] = q[c] - h;
        let minus = position_from_components(&qh, geom);
        j.set_column(c, &((plus - minus) / (2.0 * h)));
        qh[c] = q[c];
    }
    j
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub config: LimbConfig,
    /// Final tip position error, m.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_components(q: &mut DVector<f64>, limit: f64) {
    for c in q.as_mut_slice().chunks_mut(2) {
        let k = c[0].hypot(c[1]);
        if k > limit {
            let s = limit / k;
            c[0] *= s;
            c[1] *= s;
        }
    }
}

fn dls_solve(
    target: &Vector3<f64>,
    geom: &LimbGeometry,
    seed: DVector<f64>,
) -> (DVector<f64>, f64, usize) {
    let limit = geom.kappa_limit();
    let max_step = 0.25 * limit;
    let mut q = seed;
    clamp_components(&mut q, limit);
    let mut err = target - position_from_components(&q, geom);
    let mut best = (q.clone(), err.norm(), 0);
    for it in 1..=IK_MAX_ITERATIONS {
        if best.1 < IK_TOLERANCE {
            break;
        }
        let j = jacobian_at(&q, geom, FD_STEP);
        let jjt = &j * j.transpose() + Matrix3::identity() * (IK_DAMPING * IK_DAMPING);
        let Some(inv) = jjt.try_inverse() else { break };
        let mut dq = j.transpose() * (inv * err);
        let n = dq.norm();
        if n > max_step {
            dq *= max_step / n;
        }
        q += dq;
        clamp_components(&mut q, limit);
        err = target - position_from_components(&q, geom);
        let e = err.norm();
        if e < best.1 {
            best = (q.clone(), e, it);
        }
    }
    best
}

/// Damped least-squares inverse kinematics for the tip position.
///
/// Starts from `seed`; if that does not converge, retries from uniform bends
/// aimed at the target azimuth. Redundancy is resolved by proximity to the
/// seed that converged first.
pub fn inverse_kinematics(
    target: &Vector3<f64>,
    geom: &LimbGeometry,
    seed: &LimbConfig,
) -> Result<IkSolution, LimbError> {
    geom.validate()?;
    seed.validate(geom)?;
    let distance = target.norm();
    if !distance.is_finite() || distance > geom.length * (1.0 + 1e-12) {
        return Err(LimbError::Unreachable { distance, length: geom.length });
    }

    let mut seeds = vec![seed.to_components()];
    let azimuth = target.y.atan2(target.x);
    let lateral = target.x.hypot(target.y);
    let bend = 2.0 * lateral.atan2(target.z.max(1e-9) - 0.0) / geom.length;
    for scale in [1.0, 0.5, 1.5, 2.0] {
        let k = (bend * scale).min(geom.kappa_limit());
        seeds.push(LimbConfig::uniform(geom.n_segments, k, azimuth).to_components());
    }

    let mut best: Option<(DVector<f64>, f64, usize)> = None;
    for s in seeds {
        let sol = dls_solve(target, geom, s);
        let better = best.as_ref().map_or(true, |b| sol.1 < b.1);
        if better {
            best = Some(sol);
        }
        if best.as_ref().unwrap().1 < IK_TOLERANCE {
            break;
        }
    }
    let (q, residual, iterations) = best.expect("at least one seed");
    let mut config = LimbConfig::from_components(&q);
    // keep azimuths of straight segments from the seed for continuity
    for (c, s) in config.segments.iter_mut().zip(&seed.segments) {
        if c.kappa == 0.0 {
            c.phi = wrap_angle(s.phi);
        }
    }
    Ok(IkSolution { config, residual, iterations, converged: residual < IK_TOLERANCE })
}

/// Reflect a configuration across the sagittal (x-z) plane.
pub fn mirror_config(camera: &LimbConfig) -> LimbConfig {
    LimbConfig {
        segments: camera
            .segments
            .iter()
            .map(|s| Segment { kappa: s.kappa, phi: wrap_angle(-s.phi) })
            .collect(),
    }
}

/// Tactile force at the tip against the true environment, Hooke's law with
/// stiffness `k_c` along the surface normals.
pub fn tip_contact(tip: &TipPose, env: &ProxyEnvironment, k_c: f64) -> Vector3<f64> {
    env.spring_force(&tip.position, Some(k_c))
}
