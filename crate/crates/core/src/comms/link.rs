//! Availability, bandwidth and latency of the three physical links.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modes::LinkMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("link input `{0}` must be finite and nonnegative")]
    BadInput(&'static str),
    #[error("invalid link model `{0}`")]
    InvalidModel(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Umbilical,
    Vlc,
    LteWifi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub kind: LinkKind,
    /// Nominal bandwidth, kbit/s.
    pub bandwidth_kbps: f64,
    pub latency_ms: f64,
    /// Usable range, m (optical link).
    pub max_range_m: Option<f64>,
    /// Usable misalignment, deg (optical link).
    pub max_alignment_deg: Option<f64>,
    /// Fraction of the nominal bandwidth left at `max_range_m`.
    pub edge_fraction: f64,
    /// Only available shallower than this, m (surface radio).
    pub surface_depth_m: Option<f64>,
}

impl LinkModel {
    pub fn umbilical() -> Self {
        Self {
            kind: LinkKind::Umbilical,
            bandwidth_kbps: 100_000.0,
            latency_ms: 1.0,
            max_range_m: None,
            max_alignment_deg: None,
            edge_fraction: 1.0,
            surface_depth_m: None,
        }
    }

    pub fn vlc() -> Self {
        Self {
            kind: LinkKind::Vlc,
            bandwidth_kbps: 10_000.0,
            latency_ms: 5.0,
            max_range_m: Some(20.0),
            max_alignment_deg: Some(60.0),
            edge_fraction: 0.1,
            surface_depth_m: None,
        }
    }

    pub fn lte_wifi() -> Self {
        Self {
            kind: LinkKind::LteWifi,
            bandwidth_kbps: 5_000.0,
            latency_ms: 80.0,
            max_range_m: None,
            max_alignment_deg: None,
            edge_fraction: 1.0,
            surface_depth_m: Some(0.3),
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.bandwidth_kbps > 0.0 && self.bandwidth_kbps.is_finite()) {
            return Err(LinkError::InvalidModel("bandwidth_kbps"));
        }
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(LinkError::InvalidModel("latency_ms"));
        }
        if !(self.edge_fraction > 0.0 && self.edge_fraction <= 1.0) {
            return Err(LinkError::InvalidModel("edge_fraction"));
        }
        if !self.max_range_m.is_none_or(|r| r > 0.0 && r.is_finite()) {
            return Err(LinkError::InvalidModel("max_range_m"));
        }
        if !self.max_alignment_deg.is_none_or(|a| a >= 0.0 && a.is_finite()) {
            return Err(LinkError::InvalidModel("max_alignment_deg"));
        }
        if !self.surface_depth_m.is_none_or(|d| d >= 0.0 && d.is_finite()) {
            return Err(LinkError::InvalidModel("surface_depth_m"));
        }
        Ok(())
    }
}

/// Where the vehicle is with respect to the link endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkGeometry {
    pub depth: f64,
    /// Distance to the optical base station, m.
    pub range: f64,
    /// Angle between the dorsal emitter and the station bearing, deg.
    pub alignment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkQuality {
    pub kind: LinkKind,
    pub available: bool,
    /// Effective bandwidth, kbit/s (0 when unavailable).
    pub bandwidth_kbps: f64,
    pub latency_ms: f64,
}

impl LinkQuality {
    /// Unlimited bandwidth and no delay.
    pub fn ideal() -> Self {
        Self { kind: LinkKind::Umbilical, available: true, bandwidth_kbps: f64::INFINITY, latency_ms: 0.0 }
    }

    pub fn down(kind: LinkKind) -> Self {
        Self { kind, available: false, bandwidth_kbps: 0.0, latency_ms: 0.0 }
    }
}

pub fn link_available(link: &LinkModel, geo: &LinkGeometry) -> Result<LinkQuality, LinkError> {
    for (v, name) in [(geo.depth, "depth"), (geo.range, "range"), (geo.alignment, "alignment")] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(LinkError::BadInput(name));
        }
    }
    let in_range = link.max_range_m.is_none_or(|r| geo.range <= r);
    let aligned = link.max_alignment_deg.is_none_or(|a| geo.alignment <= a);
    let surfaced = link.surface_depth_m.is_none_or(|d| geo.depth < d);
    if !(in_range && aligned && surfaced) {
        return Ok(LinkQuality::down(link.kind));
    }
    // linear fade from the nominal rate to `edge_fraction` at the range limit
    let frac = link.max_range_m.map_or(1.0, |r| 1.0 - (1.0 - link.edge_fraction) * geo.range / r);
    Ok(LinkQuality {
        kind: link.kind,
        available: true,
        bandwidth_kbps: link.bandwidth_kbps * frac,
        latency_ms: link.latency_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSet {
    pub umbilical: LinkModel,
    pub vlc: LinkModel,
    pub lte_wifi: LinkModel,
}

impl Default for LinkSet {
    fn default() -> Self {
        Self { umbilical: LinkModel::umbilical(), vlc: LinkModel::vlc(), lte_wifi: LinkModel::lte_wifi() }
    }
}

impl LinkSet {
    pub fn validate(&self) -> Result<(), LinkError> {
        self.umbilical.validate()?;
        self.vlc.validate()?;
        self.lte_wifi.validate()
    }

    /// TET runs over the umbilical; NOWIRE over VLC, falling back to
    /// LTE/WiFi at the surface.
    pub fn select(&self, mode: LinkMode, geo: &LinkGeometry) -> Result<LinkQuality, LinkError> {
        match mode {
            LinkMode::Tet => link_available(&self.umbilical, geo),
            LinkMode::Nowire => {
                let vlc = link_available(&self.vlc, geo)?;
                if vlc.available {
                    return Ok(vlc);
                }
                let lte = link_available(&self.lte_wifi, geo)?;
                Ok(if lte.available { lte } else { vlc })
            }
        }
    }

    /// Whether any wireless link could carry commands.
    pub fn wireless_available(&self, geo: &LinkGeometry) -> Result<bool, LinkError> {
        Ok(self.select(LinkMode::Nowire, geo)?.available)
    }
}
