//! Labeled bounding boxes shared by the simulator, the transfer chain and the
//! store.

use serde::{Deserialize, Serialize};

use crate::geom::BBox;

/// Malaria parasite life stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Ring,
    Trophozoite,
    Schizont,
    Gametocyte,
}

impl CellClass {
    pub const ALL: [CellClass; 4] = [
        CellClass::Ring,
        CellClass::Trophozoite,
        CellClass::Schizont,
        CellClass::Gametocyte,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Ring => "ring",
            CellClass::Trophozoite => "trophozoite",
            CellClass::Schizont => "schizont",
            CellClass::Gametocyte => "gametocyte",
        }
    }
}

impl std::str::FromStr for CellClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        CellClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown cell class `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Expert,
    Transferred,
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    Confirmed,
    NeedsReview,
    OutOfFov,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Stable identifier within a region; transferred copies keep the id of
    /// the expert annotation they came from.
    pub id: String,
    /// Visible box in image pixels. `None` when the geometry could not be
    /// mapped.
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub label: CellClass,
    pub source: AnnotationSource,
    pub status: AnnotationStatus,
    /// Unclipped mapped extent, kept for audit and for chaining.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_box: Option<BBox>,
    /// The box was clipped by the image border.
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
}

impl Annotation {
    pub fn expert(id: impl Into<String>, bbox: BBox, label: CellClass) -> Self {
        Self {
            id: id.into(),
            bbox: Some(bbox),
            label,
            source: AnnotationSource::Expert,
            status: AnnotationStatus::Confirmed,
            full_box: None,
            truncated: false,
        }
    }

    /// Geometry used when propagating this annotation further.
    pub fn geometry(&self) -> Option<BBox> {
        self.full_box.or(self.bbox)
    }

    pub fn area(&self) -> f64 {
        self.bbox.map_or(0.0, |b| b.area())
    }
}
