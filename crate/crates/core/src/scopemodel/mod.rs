//! Magnification geometry, field-of-view accounting and stage calibration.
//!
//! Two notions of "how much bigger" are kept apart on purpose. The geometric
//! image scale between two magnifications is the exact magnification ratio.
//! The number of fields of view needed to cover a region is an empirical,
//! per-profile count that includes camera crop and traversal overlap, and so
//! exceeds the pure area ratio.

mod calibration;
mod profile;

pub use calibration::{
    fit_calibration, CalibrationEndpoint, CalibrationKind, CalibrationMap, StageCoord, MAX_RMS_MM, STAGE_QUANTUM_MM,
};
pub use profile::{CostClass, FovCount, MagnificationProfile, MicroscopeProfile, ProfileSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScopeError {
    #[error("unsupported magnification {0}x")]
    UnknownMagnification(u32),
    #[error("scan magnification {scan}x is coarser than region magnification {region}x")]
    ScanCoarserThanRegion { region: u32, scan: u32 },
    #[error("profile `{profile}` has no entry for {magnification}x")]
    MissingMagnification { profile: String, magnification: u32 },
    #[error("unknown microscope profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid profile `{profile}`: {reason}")]
    InvalidProfile { profile: String, reason: String },
    #[error("need at least {needed} calibration pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("calibration points have no spread; scale is undetermined")]
    DegeneratePairs,
    #[error("calibration residual RMS {rms_mm:.4} mm exceeds {limit_mm} mm")]
    ResidualTooLarge { rms_mm: f64, limit_mm: f64 },
    #[error("profile io: {0}")]
    Io(String),
}

/// Eyepiece x objective power.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Magnification {
    X100,
    X400,
    X1000,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X100, Magnification::X400, Magnification::X1000];

    pub fn value(self) -> u32 {
        match self {
            Magnification::X100 => 100,
            Magnification::X400 => 400,
            Magnification::X1000 => 1000,
        }
    }
}

impl TryFrom<u32> for Magnification {
    type Error = ScopeError;
    fn try_from(v: u32) -> Result<Self, ScopeError> {
        match v {
            100 => Ok(Magnification::X100),
            400 => Ok(Magnification::X400),
            1000 => Ok(Magnification::X1000),
            other => Err(ScopeError::UnknownMagnification(other)),
        }
    }
}

impl From<Magnification> for u32 {
    fn from(m: Magnification) -> u32 {
        m.value()
    }
}

impl std::fmt::Display for Magnification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x", self.value())
    }
}

/// Geometric image scale from one magnification to another (`to / from`).
pub fn scale_factor(from: Magnification, to: Magnification) -> f64 {
    to.value() as f64 / from.value() as f64
}

/// Fields of view at `scan_at` needed to cover one field of view at
/// `region_at`, on the given microscope.
pub fn views_to_cover(
    region_at: Magnification,
    scan_at: Magnification,
    profile: &MicroscopeProfile,
) -> Result<u32, ScopeError> {
    if scan_at < region_at {
        return Err(ScopeError::ScanCoarserThanRegion {
            region: region_at.value(),
            scan: scan_at.value(),
        });
    }
    if scan_at == region_at {
        return Ok(1);
    }
    let ratio = match profile
        .fov_counts
        .iter()
        .find(|c| c.region == region_at && c.scan == scan_at)
    {
        Some(c) => c.count,
        None => {
            profile.at(scan_at)?.fov_count_ratio_to_100x
                / profile.at(region_at)?.fov_count_ratio_to_100x
        }
    };
    Ok((ratio - 1e-9).ceil().max(1.0) as u32)
}

/// One of the six (microscope, magnification) image slots of a region, in
/// annotation-transfer chain order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", try_from = "String")]
pub enum Slot {
    #[serde(rename = "hcm_1000x")]
    Hcm1000,
    #[serde(rename = "hcm_400x")]
    Hcm400,
    #[serde(rename = "hcm_100x")]
    Hcm100,
    #[serde(rename = "lcm_100x")]
    Lcm100,
    #[serde(rename = "lcm_400x")]
    Lcm400,
    #[serde(rename = "lcm_1000x")]
    Lcm1000,
}

impl Slot {
    /// The transfer path: down the high-cost microscope, across at 100x, and
    /// back up the low-cost one.
    pub const CHAIN: [Slot; 6] = [
        Slot::Hcm1000,
        Slot::Hcm400,
        Slot::Hcm100,
        Slot::Lcm100,
        Slot::Lcm400,
        Slot::Lcm1000,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Hcm1000 => "hcm_1000x",
            Slot::Hcm400 => "hcm_400x",
            Slot::Hcm100 => "hcm_100x",
            Slot::Lcm100 => "lcm_100x",
            Slot::Lcm400 => "lcm_400x",
            Slot::Lcm1000 => "lcm_1000x",
        }
    }

    pub fn cost_class(self) -> CostClass {
        match self {
            Slot::Hcm1000 | Slot::Hcm400 | Slot::Hcm100 => CostClass::Hcm,
            _ => CostClass::Lcm,
        }
    }

    /// Default profile id for the slot's microscope.
    pub fn microscope_id(self) -> &'static str {
        match self.cost_class() {
            CostClass::Hcm => "hcm",
            CostClass::Lcm => "lcm",
        }
    }

    pub fn magnification(self) -> Magnification {
        match self {
            Slot::Hcm1000 | Slot::Lcm1000 => Magnification::X1000,
            Slot::Hcm400 | Slot::Lcm400 => Magnification::X400,
            Slot::Hcm100 | Slot::Lcm100 => Magnification::X100,
        }
    }

    pub fn chain_position(self) -> usize {
        Slot::CHAIN.iter().position(|&s| s == self).expect("slot in chain")
    }
}

impl std::str::FromStr for Slot {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Slot::CHAIN
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| format!("unknown slot `{s}`"))
    }
}

impl TryFrom<String> for Slot {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
