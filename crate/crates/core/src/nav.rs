//! Simulated sensor suite and known-map EKF localisation.
//!
//! The estimate is the planar pose `(x, y, psi)`. Dead reckoning integrates
//! the DVL bottom-track velocity and the gyro yaw rate; sonar range-bearing
//! detections of artificial landmarks and surface GNSS fixes correct it.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::math::wrap_angle;

/// GNSS is only received above this depth, m.
pub const SURFACE_DEPTH: f64 = 0.3;

/// Squared Mahalanobis gate (3 sigma).
pub const GATE: f64 = 9.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavError {
    #[error("duplicate landmark id {0}")]
    DuplicateLandmark(u32),
    #[error("landmark {0} has non-finite coordinates")]
    InvalidLandmark(u32),
    #[error("GNSS fix rejected at depth {0} m")]
    Submerged(f64),
    #[error("invalid noise configuration: {0}")]
    InvalidNoise(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landmark {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkMap {
    pub landmarks: Vec<Landmark>,
}

impl LandmarkMap {
    pub fn validate(&self) -> Result<(), NavError> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.landmarks {
            if !seen.insert(l.id) {
                return Err(NavError::DuplicateLandmark(l.id));
            }
            if !(l.x.is_finite() && l.y.is_finite()) {
                return Err(NavError::InvalidLandmark(l.id));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }
}

/// One-sigma sensor noise levels and the sonar range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub dvl: f64,
    pub gyro: f64,
    pub depth: f64,
    pub gnss: f64,
    pub range: f64,
    pub bearing: f64,
    pub sonar_max_range: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { dvl: 0.02, gyro: 0.005, depth: 0.02, gnss: 0.5, range: 0.1, bearing: 0.02, sonar_max_range: 30.0 }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self { dvl: 0.0, gyro: 0.0, depth: 0.0, gnss: 0.0, range: 0.0, bearing: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NavError> {
        let sigmas = [self.dvl, self.gyro, self.depth, self.gnss, self.range, self.bearing];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(NavError::InvalidNoise("sigmas must be finite and >= 0"));
        }
        if !(self.sonar_max_range >= 0.0) {
            return Err(NavError::InvalidNoise("sonar_max_range must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub id: u32,
    pub range: f64,
    /// Relative to the vehicle heading, rad.
    pub bearing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorFrame {
    /// Body-frame velocity over ground (bottom track), m/s.
    pub dvl: [f64; 2],
    pub yaw_rate: f64,
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gnss: Option<[f64; 2]>,
    pub detections: Vec<Detection>,
    /// Noise levels the frame was generated with.
    pub noise: NoiseConfig,
}

fn perturb(rng: &mut ChaCha8Rng, value: f64, sigma: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    value + sigma * n
}

/// Geometric range and relative bearing from `pose` to a landmark.
pub fn range_bearing(x: f64, y: f64, psi: f64, l: &Landmark) -> (f64, f64) {
    let (dx, dy) = (l.x - x, l.y - y);
    (dx.hypot(dy), wrap_angle(dy.atan2(dx) - psi))
}

/// Sample all sensors from the true state. Deterministic in `seed`.
pub fn sense(truth: &VehicleState, current: [f64; 2], map: &LandmarkMap, noise: &NoiseConfig, seed: u64) -> SensorFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, c) = truth.psi.sin_cos();
    // bottom track sees the current-induced drift as body velocity
    let ground_u = truth.u + c * current[0] + s * current[1];
    let ground_v = truth.v - s * current[0] + c * current[1];
    let dvl = [perturb(&mut rng, ground_u, noise.dvl), perturb(&mut rng, ground_v, noise.dvl)];
    let yaw_rate = perturb(&mut rng, truth.r, noise.gyro);
    let depth = perturb(&mut rng, truth.z, noise.depth).max(0.0);
    let gnss = (truth.z < SURFACE_DEPTH)
        .then(|| [perturb(&mut rng, truth.x, noise.gnss), perturb(&mut rng, truth.y, noise.gnss)]);
    let mut detections = Vec::new();
    for l in &map.landmarks {
        let (range, bearing) = range_bearing(truth.x, truth.y, truth.psi, l);
        if range > noise.sonar_max_range {
            continue;
        }
        detections.push(Detection {
            id: l.id,
            range: perturb(&mut rng, range, noise.range).max(0.0),
            bearing: wrap_angle(perturb(&mut rng, bearing, noise.bearing)),
        });
    }
    SensorFrame { dvl, yaw_rate, depth, gnss, detections, noise: *noise }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavEstimate {
    /// (x, y, psi)
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl NavEstimate {
    pub fn new(x: f64, y: f64, psi: f64, cov: Matrix3<f64>) -> Self {
        Self { mean: Vector3::new(x, y, wrap_angle(psi)), cov }
    }

    /// Symmetric within 1e-12 and no eigenvalue below `-1e-12 * scale`.
    pub fn is_psd(&self) -> bool {
        let scale = self.cov.norm().max(1e-300);
        (self.cov - self.cov.transpose()).norm() <= 1e-12 * scale
            && self.cov.symmetric_eigenvalues().iter().all(|&l| l >= -1e-12 * scale)
    }

    /// Normalised estimation error squared against the true pose.
    pub fn nees(&self, truth: &VehicleState) -> f64 {
        let e = Vector3::new(self.mean[0] - truth.x, self.mean[1] - truth.y, wrap_angle(self.mean[2] - truth.psi));
        match self.cov.try_inverse() {
            Some(inv) => (e.transpose() * inv * e)[0],
            None => f64::INFINITY,
        }
    }
}

fn symmetrize(p: &Matrix3<f64>) -> Matrix3<f64> {
    (p + p.transpose()) * 0.5
}

/// Dead-reckoning model noise, variance per second for (x, y, psi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavParams {
    pub process_noise: [f64; 3],
}

impl Default for NavParams {
    fn default() -> Self {
        Self { process_noise: [1e-5, 1e-5, 1e-7] }
    }
}

/// Propagate with the frame's DVL velocity and yaw rate.
///
/// `P' = F P F^T + G S_u G^T + Q_dr dt` where `S_u` holds the frame's DVL and
/// gyro variances.
pub fn predict(est: &NavEstimate, frame: &SensorFrame, params: &NavParams, dt: f64) -> NavEstimate {
    let psi = est.mean[2];
    let (s, c) = psi.sin_cos();
    let [u, v] = frame.dvl;
    let mean = Vector3::new(
        est.mean[0] + (u * c - v * s) * dt,
        est.mean[1] + (u * s + v * c) * dt,
        wrap_angle(psi + frame.yaw_rate * dt),
    );
    let f = Matrix3::new(
        1.0, 0.0, (-u * s - v * c) * dt,
        0.0, 1.0, (u * c - v * s) * dt,
        0.0, 0.0, 1.0,
    );
    let g = Matrix3::new(c * dt, -s * dt, 0.0, s * dt, c * dt, 0.0, 0.0, 0.0, dt);
    let su = Matrix3::from_diagonal(&Vector3::new(
        frame.noise.dvl.powi(2),
        frame.noise.dvl.powi(2),
        frame.noise.gyro.powi(2),
    ));
    let q = Matrix3::from_diagonal(&Vector3::from(params.process_noise)) * dt;
    let cov = symmetrize(&(f * est.cov * f.transpose() + g * su * g.transpose() + q));
    NavEstimate { mean, cov }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub accepted: u32,
    pub gated: u32,
    pub unknown: u32,
}

/// Sequential EKF range-bearing updates with 3-sigma Mahalanobis gating and
/// Joseph-form covariance updates.
pub fn update(
    est: &NavEstimate,
    detections: &[Detection],
    map: &LandmarkMap,
    noise: &NoiseConfig,
) -> (NavEstimate, UpdateStats) {
    let mut stats = UpdateStats::default();
    let mut out = *est;
    let r = Matrix2::from_diagonal(&Vector2::new(noise.range.powi(2), noise.bearing.powi(2)));
    for d in detections {
        let Some(l) = map.get(d.id) else {
            stats.unknown += 1;
            continue;
        };
        let (dx, dy) = (l.x - out.mean[0], l.y - out.mean[1]);
        let q = dx * dx + dy * dy;
        if q < 1e-12 {
            stats.gated += 1;
            continue;
        }
        let rho = q.sqrt();
        let predicted = Vector2::new(rho, wrap_angle(dy.atan2(dx) - out.mean[2]));
        let h = Matrix2x3::new(-dx / rho, -dy / rho, 0.0, dy / q, -dx / q, -1.0);
        let innovation = Vector2::new(d.range - predicted[0], wrap_angle(d.bearing - predicted[1]));
        let s = h * out.cov * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            stats.gated += 1;
            continue;
        };
        if (innovation.transpose() * s_inv * innovation)[0] > GATE {
            stats.gated += 1;
            continue;
        }
        let k: Matrix3x2<f64> = out.cov * h.transpose() * s_inv;
        let mut mean = out.mean + k * innovation;
        mean[2] = wrap_angle(mean[2]);
        let ikh = Matrix3::identity() - k * h;
        let cov = symmetrize(&(ikh * out.cov * ikh.transpose() + k * r * k.transpose()));
        out = NavEstimate { mean, cov };
        stats.accepted += 1;
    }
    (out, stats)
}

/// Position update from a surface GNSS fix (identity measurement on x, y).
pub fn gnss_reset(est: &NavEstimate, fix: [f64; 2], depth: f64, sigma: f64) -> Result<NavEstimate, NavError> {
    if !(depth < SURFACE_DEPTH) {
        return Err(NavError::Submerged(depth));
    }
    let h = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let r = Matrix2::identity() * sigma * sigma;
    let s = h * est.cov * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(NavError::InvalidNoise("singular GNSS innovation covariance"))?;
    let k: Matrix3x2<f64> = est.cov * h.transpose() * s_inv;
    let innovation = Vector2::new(fix[0] - est.mean[0], fix[1] - est.mean[1]);
    let mut mean = est.mean + k * innovation;
    mean[2] = wrap_angle(mean[2]);
    let ikh = Matrix3::identity() - k * h;
    let cov = symmetrize(&(ikh * est.cov * ikh.transpose() + k * r * k.transpose()));
    Ok(NavEstimate { mean, cov })
}
