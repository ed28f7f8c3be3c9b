//! Bounded planar contact patches, shared by the limb tip sensors (ground
//! truth) and the dry-end proxy model.
//!
//! A patch is the plane `n . p = offset` with `n` pointing into free space.
//! The solid lies behind the plane inside the patch rectangle. The effective
//! penetration of a point is `min(depth, distance to the patch edge)`, which
//! keeps the contact force Lipschitz in position when a point slides off the
//! patch.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContactError {
    #[error("patch {index}: {reason}")]
    InvalidPatch { index: usize, reason: &'static str },
    #[error("proxy stiffness must be positive and damping non-negative")]
    InvalidGains,
}

/// Rectangle in the patch's in-plane coordinates `(p . u, p . v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchExtent {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl PatchExtent {
    /// Signed distance from `(pu, pv)` to the nearest edge, positive inside.
    pub fn edge_distance(&self, pu: f64, pv: f64) -> f64 {
        (pu - self.u_min)
            .min(self.u_max - pu)
            .min(pv - self.v_min)
            .min(self.v_max - pv)
    }

    /// Grow the rectangle so `(pu, pv)` lies at least `margin` inside it.
    pub fn include(&mut self, pu: f64, pv: f64, margin: f64) {
        self.u_min = self.u_min.min(pu - margin);
        self.u_max = self.u_max.max(pu + margin);
        self.v_min = self.v_min.min(pv - margin);
        self.v_max = self.v_max.max(pv + margin);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanePatch {
    /// Unit normal pointing into free space.
    pub normal: Vector3<f64>,
    pub offset: f64,
    /// `None` for an unbounded plane.
    pub extent: Option<PatchExtent>,
    /// Contact stiffness of this patch, N/m.
    pub stiffness: f64,
}

/// Deterministic orthonormal in-plane basis for a unit normal.
pub fn in_plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = normal.abs();
    let helper = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = helper.cross(normal).normalize();
    let v = normal.cross(&u);
    (u, v)
}

impl PlanePatch {
    pub fn unbounded(normal: Vector3<f64>, offset: f64, stiffness: f64) -> Self {
        Self { normal: normal.normalize(), offset, extent: None, stiffness }
    }

    /// Positive in free space.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn plane_coords(&self, p: &Vector3<f64>) -> (f64, f64) {
        let (u, v) = in_plane_basis(&self.normal);
        (u.dot(p), v.dot(p))
    }

    /// Distance to the patch boundary measured in the plane (infinite for an
    /// unbounded plane, negative outside).
    pub fn edge_distance(&self, p: &Vector3<f64>) -> f64 {
        match &self.extent {
            None => f64::INFINITY,
            Some(e) => {
                let (pu, pv) = self.plane_coords(p);
                e.edge_distance(pu, pv)
            }
        }
    }

    /// Effective penetration `min(depth, edge distance)`, zero when free.
    pub fn penetration(&self, p: &Vector3<f64>) -> f64 {
        let depth = -self.signed_distance(p);
        if depth <= 0.0 {
            return 0.0;
        }
        depth.min(self.edge_distance(p)).max(0.0)
    }

    /// Move the plane along its normal so that `signed_distance(p) == sd`.
    pub fn translate_to(&mut self, p: &Vector3<f64>, sd: f64) {
        self.offset = self.normal.dot(p) - sd;
    }

    fn validate(&self, index: usize) -> Result<(), ContactError> {
        let bad = |reason| Err(ContactError::InvalidPatch { index, reason });
        if !((self.normal.norm() - 1.0).abs() < 1e-9) {
            return bad("normal must be unit length");
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite");
        }
        if !(self.stiffness > 0.0 && self.stiffness.is_finite()) {
            return bad("stiffness must be positive");
        }
        if let Some(e) = &self.extent {
            if !(e.u_min <= e.u_max && e.v_min <= e.v_max) {
                return bad("extent bounds out of order");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyEnvironment {
    pub patches: Vec<PlanePatch>,
    /// Nominal stiffness, N/m.
    pub stiffness: f64,
    /// Damping, N s/m.
    pub damping: f64,
}

impl ProxyEnvironment {
    pub fn empty(stiffness: f64, damping: f64) -> Self {
        Self { patches: Vec::new(), stiffness, damping }
    }

    pub fn validate(&self) -> Result<(), ContactError> {
        if !(self.stiffness > 0.0 && self.damping >= 0.0) {
            return Err(ContactError::InvalidGains);
        }
        for (i, p) in self.patches.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    /// Index of the patch whose surface is closest to `p`, counting distance
    /// outside a patch's rectangle as extra distance.
    pub fn nearest_patch(&self, p: &Vector3<f64>) -> Option<usize> {
        let score = |patch: &PlanePatch| {
            patch.signed_distance(p).abs() + (-patch.edge_distance(p)).max(0.0)
        };
        self.patches
            .iter()
            .enumerate()
            .min_by(|a, b| score(a.1).total_cmp(&score(b.1)))
            .map(|(i, _)| i)
    }

    /// Spring force of all penetrated patches at `p` with stiffness `k`
    /// (the per-patch stiffness when `k` is `None`).
    pub fn spring_force(&self, p: &Vector3<f64>, k: Option<f64>) -> Vector3<f64> {
        self.patches
            .iter()
            .map(|patch| patch.normal * (k.unwrap_or(patch.stiffness) * patch.penetration(p)))
            .sum()
    }
}
