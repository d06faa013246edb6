use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Magnification, ScopeError};
use crate::imagecore::DegradationParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostClass {
    #[serde(rename = "HCM")]
    Hcm,
    #[serde(rename = "LCM")]
    Lcm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnificationProfile {
    pub magnification: Magnification,
    /// Diameter of the circular visual field.
    pub fov_diameter_mm: f64,
    /// Final image sampling density.
    pub px_per_mm: f64,
    /// Fields of view at this magnification per 100x field of view.
    pub fov_count_ratio_to_100x: f64,
    /// Slide offset of the image center from the stage reading, produced by
    /// objective misalignment. Cross-magnification calibration recovers the
    /// differences between these.
    #[serde(default)]
    pub optical_offset_mm: [f64; 2],
}

/// Empirical number of `scan` fields covering one `region` field. Takes
/// precedence over the ratio of `fov_count_ratio_to_100x` values, which is not
/// transitive in reported counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovCount {
    pub region: Magnification,
    pub scan: Magnification,
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroscopeProfile {
    pub id: String,
    pub cost_class: CostClass,
    /// Stage reading at the slide origin; `slide = stage - stage_origin`.
    #[serde(default)]
    pub stage_origin_mm: [f64; 2],
    pub magnifications: Vec<MagnificationProfile>,
    #[serde(default)]
    pub fov_counts: Vec<FovCount>,
    #[serde(default)]
    pub degradation: DegradationParams,
}

fn mag(
    m: Magnification,
    fov: f64,
    ppm: f64,
    ratio: f64,
    offset: [f64; 2],
) -> MagnificationProfile {
    MagnificationProfile {
        magnification: m,
        fov_diameter_mm: fov,
        px_per_mm: ppm,
        fov_count_ratio_to_100x: ratio,
        optical_offset_mm: offset,
    }
}

fn default_counts() -> Vec<FovCount> {
    use Magnification::*;
    vec![
        FovCount { region: X100, scan: X400, count: 20.0 },
        FovCount { region: X100, scan: X1000, count: 180.0 },
        FovCount { region: X400, scan: X1000, count: 20.0 },
    ]
}

impl MicroscopeProfile {
    /// High-cost microscope: clean optics, 1024x768 camera sampling at
    /// 1 px/um at 100x.
    pub fn default_hcm() -> Self {
        use Magnification::*;
        Self {
            id: "hcm".into(),
            cost_class: CostClass::Hcm,
            stage_origin_mm: [0.0, 0.0],
            magnifications: vec![
                mag(X100, 1.8, 1000.0, 1.0, [0.0, 0.0]),
                mag(X400, 0.45, 4000.0, 20.0, [0.012, -0.008]),
                mag(X1000, 0.18, 10000.0, 180.0, [0.018, 0.004]),
            ],
            fov_counts: default_counts(),
            degradation: DegradationParams::identity(),
        }
    }

    /// Low-cost microscope: narrower field (crop 0.8, so 1.25x denser
    /// sampling), blurrier optics, shifted stage origin.
    pub fn default_lcm() -> Self {
        use Magnification::*;
        Self {
            id: "lcm".into(),
            cost_class: CostClass::Lcm,
            stage_origin_mm: [1.25, -0.5],
            magnifications: vec![
                mag(X100, 1.44, 1250.0, 1.0, [0.0, 0.0]),
                mag(X400, 0.36, 5000.0, 20.0, [-0.010, 0.006]),
                mag(X1000, 0.144, 12500.0, 180.0, [0.006, 0.014]),
            ],
            fov_counts: default_counts(),
            degradation: DegradationParams::low_cost_default(),
        }
    }

    /// Low-cost stage and offsets with high-cost optics: no degradation, full
    /// field.
    pub fn ideal_lcm() -> Self {
        let hcm = Self::default_hcm();
        let lcm = Self::default_lcm();
        let magnifications = hcm
            .magnifications
            .iter()
            .zip(&lcm.magnifications)
            .map(|(h, l)| MagnificationProfile {
                optical_offset_mm: l.optical_offset_mm,
                ..h.clone()
            })
            .collect();
        Self {
            id: "lcm".into(),
            cost_class: CostClass::Lcm,
            stage_origin_mm: lcm.stage_origin_mm,
            magnifications,
            fov_counts: default_counts(),
            degradation: DegradationParams::identity(),
        }
    }

    pub fn at(&self, m: Magnification) -> Result<&MagnificationProfile, ScopeError> {
        self.magnifications
            .iter()
            .find(|p| p.magnification == m)
            .ok_or_else(|| ScopeError::MissingMagnification {
                profile: self.id.clone(),
                magnification: m.value(),
            })
    }

    pub fn validate(&self) -> Result<(), ScopeError> {
        let invalid = |reason: &str| ScopeError::InvalidProfile {
            profile: self.id.clone(),
            reason: reason.to_string(),
        };
        let mut entries: Vec<&MagnificationProfile> = self.magnifications.iter().collect();
        entries.sort_by_key(|p| p.magnification);
        if entries.windows(2).any(|w| w[0].magnification == w[1].magnification) {
            return Err(invalid("duplicate magnification entries"));
        }
        if entries
            .iter()
            .any(|p| !(p.fov_diameter_mm > 0.0 && p.px_per_mm > 0.0 && p.fov_count_ratio_to_100x > 0.0))
        {
            return Err(invalid("fov diameter, px_per_mm and fov ratio must be positive"));
        }
        if entries.windows(2).any(|w| w[1].fov_diameter_mm >= w[0].fov_diameter_mm) {
            return Err(invalid("fov diameter must strictly decrease with magnification"));
        }
        if let Some(base) = entries.first() {
            for p in &entries[1..] {
                let expected = p.magnification.value() as f64 / base.magnification.value() as f64;
                let actual = p.px_per_mm / base.px_per_mm;
                if (actual / expected - 1.0).abs() > 0.05 {
                    return Err(invalid("px_per_mm must track magnification within 5%"));
                }
            }
        }
        self.degradation
            .validate()
            .map_err(|e| invalid(&e.to_string()))
    }
}

/// The microscope profiles known to a session, keyed by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    profiles: BTreeMap<String, MicroscopeProfile>,
}

impl ProfileSet {
    pub fn new(profiles: impl IntoIterator<Item = MicroscopeProfile>) -> Result<Self, ScopeError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            p.validate()?;
            map.insert(p.id.clone(), p);
        }
        Ok(Self { profiles: map })
    }

    /// Shipped high- and low-cost defaults.
    pub fn defaults() -> Self {
        Self::new([MicroscopeProfile::default_hcm(), MicroscopeProfile::default_lcm()])
            .expect("default profiles are valid")
    }

    /// Both microscopes with clean optics.
    pub fn ideal() -> Self {
        Self::new([MicroscopeProfile::default_hcm(), MicroscopeProfile::ideal_lcm()])
            .expect("ideal profiles are valid")
    }

    pub fn get(&self, id: &str) -> Result<&MicroscopeProfile, ScopeError> {
        self.profiles
            .get(id)
            .ok_or_else(|| ScopeError::UnknownProfile(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &MicroscopeProfile> {
        self.profiles.values()
    }

    /// Loads every `*.json` profile in a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, ScopeError> {
        let io = |e: std::io::Error| ScopeError::Io(format!("{}: {e}", dir.display()));
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut profiles = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(io)?;
            let prof: MicroscopeProfile = serde_json::from_str(&text)
                .map_err(|e| ScopeError::Io(format!("{}: {e}", p.display())))?;
            profiles.push(prof);
        }
        Self::new(profiles)
    }

    /// Writes `<id>.json` for every profile.
    pub fn save_dir(&self, dir: &Path) -> Result<(), ScopeError> {
        let io = |e: std::io::Error| ScopeError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        for p in self.profiles.values() {
            let mut text = serde_json::to_string_pretty(p).expect("profile serializes");
            text.push('\n');
            std::fs::write(dir.join(format!("{}.json", p.id)), text).map_err(io)?;
        }
        Ok(())
    }
}
