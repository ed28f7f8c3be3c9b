//! Model-mediated teleoperation.
//!
//! The operator's master device interacts with a local proxy of the remote
//! scene (bounded planes). Contact forces are rendered from the proxy and the
//! proxy is corrected whenever the tactile sensors at the limb tips disagree.

use nalgebra::{Isometry3, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{in_plane_basis, ContactError, PatchExtent, PlanePatch, ProxyEnvironment};
use crate::limbs::{inverse_kinematics, LimbConfig, LimbError, LimbGeometry};
use crate::modes::{ModeState, ReasonCode, Rejection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeleopError {
    #[error("cluster {cluster}: {reason}")]
    DegenerateFit { cluster: usize, reason: &'static str },
    #[error("no plane could be fitted to the depth samples")]
    NoPatch,
    #[error("master increment {norm} m exceeds the per-tick limit {limit} m")]
    IncrementTooLarge { norm: f64, limit: f64 },
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Mode(#[from] Rejection),
    #[error(transparent)]
    Limb(#[from] LimbError),
    #[error(transparent)]
    Contact(#[from] ContactError),
}

/// Relative extent inflation of fitted patches.
pub const EXTENT_INFLATION: f64 = 0.10;

/// Hysteresis margin used when retreating a patch, m.
pub const HYSTERESIS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyBuildParams {
    /// Samples closer than this are chained into one cluster, m.
    pub cluster_radius: f64,
    /// Sensor position; fitted normals are turned towards it. Without a
    /// viewpoint the dominant normal component is made positive.
    pub viewpoint: Option<[f64; 3]>,
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for ProxyBuildParams {
    fn default() -> Self {
        Self { cluster_radius: 0.1, viewpoint: None, stiffness: 500.0, damping: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyFit {
    pub proxy: ProxyEnvironment,
    /// Clusters whose fit was rejected.
    pub rejected: Vec<TeleopError>,
}

fn clusters(points: &[Vector3<f64>], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if (points[i] - points[j]).norm() <= radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_index = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_index[r] == usize::MAX {
            root_index[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_index[r]].push(i);
    }
    groups
}

/// Total-least-squares plane through `points`: the normal is the eigenvector
/// of the smallest eigenvalue of the sample covariance.
pub fn fit_plane(
    points: &[Vector3<f64>],
    viewpoint: Option<&Vector3<f64>>,
) -> Result<(Vector3<f64>, f64), &'static str> {
    if points.len() < 3 {
        return Err("fewer than 3 samples");
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - centroid) * (p - centroid).transpose())
        .sum::<Matrix3<f64>>()
        / points.len() as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(large > 0.0) || mid <= 1e-10 * large {
        return Err("samples are collinear");
    }
    debug_assert!(small <= mid);
    let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).normalize();
    let flip = match viewpoint {
        Some(v) => n.dot(&(v - centroid)) < 0.0,
        None => {
            let i = n.iamax();
            n[i] < 0.0
        }
    };
    if flip {
        n = -n;
    }
    Ok((n, n.dot(&centroid)))
}

fn extent_of(points: &[Vector3<f64>], normal: &Vector3<f64>) -> PatchExtent {
    let (u, v) = in_plane_basis(normal);
    let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let (pu, pv) = (u.dot(p), v.dot(p));
        lo_u = lo_u.min(pu);
        hi_u = hi_u.max(pu);
        lo_v = lo_v.min(pv);
        hi_v = hi_v.max(pv);
    }
    let (gu, gv) = (0.5 * EXTENT_INFLATION * (hi_u - lo_u), 0.5 * EXTENT_INFLATION * (hi_v - lo_v));
    PatchExtent { u_min: lo_u - gu, u_max: hi_u + gu, v_min: lo_v - gv, v_max: hi_v + gv }
}

fn coincident(a: &PlanePatch, b: &PlanePatch) -> bool {
    a.normal.dot(&b.normal) > 10f64.to_radians().cos() && (a.offset - b.offset).abs() < 0.05
}

/// Fit one bounded plane per spatial cluster of depth samples. Patches of the
/// prior that coincide with a new fit are replaced; the rest are kept.
pub fn build_proxy(
    samples: &[Vector3<f64>],
    prior: Option<&ProxyEnvironment>,
    params: &ProxyBuildParams,
) -> Result<ProxyFit, TeleopError> {
    if samples.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(TeleopError::NonFinite("depth sample"));
    }
    let mut proxy = prior
        .cloned()
        .unwrap_or_else(|| ProxyEnvironment::empty(params.stiffness, params.damping));
    let viewpoint = params.viewpoint.map(Vector3::from);
    let mut rejected = Vec::new();
    let mut fitted = 0;
    for (ci, idx) in clusters(samples, params.cluster_radius).into_iter().enumerate() {
        let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| samples[i]).collect();
        match fit_plane(&pts, viewpoint.as_ref()) {
            Ok((normal, offset)) => {
                let patch = PlanePatch { normal, offset, extent: Some(extent_of(&pts, &normal)), stiffness: proxy.stiffness };
                proxy.patches.retain(|p| !coincident(p, &patch));
                proxy.patches.push(patch);
                fitted += 1;
            }
            Err(reason) => rejected.push(TeleopError::DegenerateFit { cluster: ci, reason }),
        }
    }
    if fitted == 0 {
        return Err(rejected.into_iter().next().unwrap_or(TeleopError::NoPatch));
    }
    proxy.validate()?;
    Ok(ProxyFit { proxy, rejected })
}

/// Kelvin-Voigt contact force against every penetrated patch:
/// `(k d + b max(0, -v.n)) n`. Never pulls the tip in.
pub fn estimate_force(position: &Vector3<f64>, velocity: &Vector3<f64>, proxy: &ProxyEnvironment) -> Vector3<f64> {
    proxy
        .patches
        .iter()
        .map(|patch| {
            let d = patch.penetration(position);
            if d <= 0.0 {
                return Vector3::zeros();
            }
            let approach = (-velocity.dot(&patch.normal)).max(0.0);
            patch.normal * (patch.stiffness * d + proxy.damping * approach)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TactileMeasurement {
    pub force: [f64; 3],
    pub position: [f64; 3],
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconcileParams {
    /// Measured forces below this are treated as no contact, N.
    pub contact_threshold: f64,
    /// Half size of a patch created from a contact in an empty proxy, m.
    pub new_patch_half_size: f64,
}

impl Default for ReconcileParams {
    fn default() -> Self {
        Self { contact_threshold: 0.05, new_patch_half_size: 0.05 }
    }
}

fn penetrated(proxy: &ProxyEnvironment, p: &Vector3<f64>) -> bool {
    proxy.patches.iter().any(|patch| patch.penetration(p) > 0.0)
}

/// Correct the proxy from one tactile sample.
///
/// * contact measured, proxy free: the nearest patch is moved along its
///   normal so that its spring reproduces the measured force at the tip
///   (penetration `|F| / k`), and grown to cover the tip;
/// * proxy in contact, nothing measured: every penetrated patch retreats to
///   `HYSTERESIS` beyond the tip;
/// * both in contact: every penetrated patch's stiffness is scaled by
///   `|F| / |F_proxy|` (so a single patch gets `|F| / d`), clamped to
///   `[0.1 k, 10 k]` of the nominal stiffness; where the clamp is active the
///   patch is moved so its spring force still scales by the same factor.
pub fn reconcile(
    proxy: &ProxyEnvironment,
    tactile: &TactileMeasurement,
    params: &ReconcileParams,
) -> Result<ProxyEnvironment, TeleopError> {
    let force = Vector3::from(tactile.force);
    let p = Vector3::from(tactile.position);
    if !(force.iter().chain(p.iter()).all(|c| c.is_finite()) && tactile.t.is_finite()) {
        return Err(TeleopError::NonFinite("tactile measurement"));
    }
    let mut out = proxy.clone();
    let measured = force.norm();
    let in_contact = measured > params.contact_threshold;
    match (in_contact, penetrated(proxy, &p)) {
        (false, false) => {}
        (false, true) => {
            for patch in out.patches.iter_mut().filter(|patch| patch.penetration(&p) > 0.0) {
                patch.translate_to(&p, HYSTERESIS);
            }
        }
        (true, false) => match proxy.nearest_patch(&p) {
            Some(i) => {
                let patch = &mut out.patches[i];
                let d = measured / patch.stiffness;
                patch.translate_to(&p, -d);
                let (pu, pv) = patch.plane_coords(&p);
                if let Some(e) = patch.extent.as_mut() {
                    e.include(pu, pv, 2.0 * d + HYSTERESIS);
                }
            }
            None => {
                let normal = force / measured;
                let d = measured / out.stiffness;
                let mut patch = PlanePatch::unbounded(normal, 0.0, out.stiffness);
                patch.translate_to(&p, -d);
                let (pu, pv) = patch.plane_coords(&p);
                let h = params.new_patch_half_size.max(2.0 * d);
                patch.extent = Some(PatchExtent { u_min: pu - h, u_max: pu + h, v_min: pv - h, v_max: pv + h });
                out.patches.push(patch);
            }
        },
        (true, true) => {
            let predicted = proxy.spring_force(&p, None).norm();
            if predicted < 1e-12 {
                // opposing patches cancel; nothing to scale
                return Ok(out);
            }
            let scale = measured / predicted;
            for patch in out.patches.iter_mut() {
                let d = patch.penetration(&p);
                if d <= 0.0 {
                    continue;
                }
                let wanted = scale * patch.stiffness * d;
                let k = (scale * patch.stiffness).clamp(0.1 * proxy.stiffness, 10.0 * proxy.stiffness);
                if (k - patch.stiffness).abs() > 1e-9 * patch.stiffness {
                    patch.stiffness = k;
                }
                let depth = wanted / patch.stiffness;
                if (depth - d).abs() > 1e-9 * d {
                    // clamp active: move the surface so the spring still matches
                    patch.translate_to(&p, -depth);
                    let (pu, pv) = patch.plane_coords(&p);
                    if let Some(e) = patch.extent.as_mut() {
                        e.include(pu, pv, 2.0 * depth + HYSTERESIS);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterCommand {
    /// Tip target increment in master coordinates, m.
    pub increment: [f64; 3],
    pub clutch: bool,
    /// Master-to-limb workspace scale factor.
    pub scale: f64,
}

/// Largest accepted master increment per tick, m.
pub const MAX_INCREMENT: f64 = 0.01;

impl MasterCommand {
    pub fn validate(&self) -> Result<(), TeleopError> {
        if !(self.increment.iter().all(|c| c.is_finite()) && self.scale.is_finite() && self.scale > 0.0) {
            return Err(TeleopError::NonFinite("master command"));
        }
        let norm = Vector3::from(self.increment).norm();
        if norm > MAX_INCREMENT {
            return Err(TeleopError::IncrementTooLarge { norm, limit: MAX_INCREMENT });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleopState {
    /// Commanded tip position in the world frame.
    pub target: Vector3<f64>,
    pub config: LimbConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleopOutput {
    pub state: TeleopState,
    /// Force rendered on the master, N (world frame).
    pub haptic: Vector3<f64>,
    pub ik_residual: f64,
}

/// One teleoperation tick for a single limb whose base sits at `base` in the
/// world frame.
pub fn teleop_tick(
    master: &MasterCommand,
    state: &TeleopState,
    proxy: &ProxyEnvironment,
    mode: ModeState,
    base: &Isometry3<f64>,
    geom: &LimbGeometry,
    dt: f64,
) -> Result<TeleopOutput, TeleopError> {
    if !mode.permits_limbs() {
        return Err(Rejection::new(ReasonCode::ModeForbidsCommand, format!("limb teleoperation not permitted in {mode}")).into());
    }
    master.validate()?;
    let step = if master.clutch { Vector3::from(master.increment) * master.scale } else { Vector3::zeros() };
    let mut local = base.inverse_transform_point(&Point3::from(state.target + step)).coords;
    let reach = geom.length * (1.0 - 1e-9);
    if local.norm() > reach {
        local *= reach / local.norm();
    }
    let target = base.transform_point(&Point3::from(local)).coords;
    let velocity = (target - state.target) / dt;
    let ik = inverse_kinematics(&local, geom, &state.config)?;
    let haptic = estimate_force(&target, &velocity, proxy);
    Ok(TeleopOutput {
        state: TeleopState { target, config: ik.config },
        haptic,
        ik_residual: ik.residual,
    })
}
