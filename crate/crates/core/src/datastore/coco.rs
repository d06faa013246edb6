//! COCO-style detection export.

use serde::{Deserialize, Serialize};

use super::{Manifest, Split};
use crate::annotation::AnnotationStatus;
use crate::scopemodel::Slot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub region_id: String,
    pub slot: Slot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` from the top-left corner.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Every image of every region, each label once in the split its region
/// belongs to.
pub fn image_splits(m: &Manifest) -> Vec<(String, Slot, Option<Split>)> {
    m.regions
        .iter()
        .flat_map(|r| {
            let split = m.splits.as_ref().and_then(|s| s.assignment.get(&r.region_id).copied());
            r.slots.keys().map(move |slot| (r.region_id.clone(), *slot, split))
        })
        .collect()
}

/// Exports the boxed, in-view annotations, optionally restricted to one split.
pub fn export_coco(m: &Manifest, only: Option<Split>) -> CocoDataset {
    let categories = super::categories()
        .iter()
        .map(|c| CocoCategory { id: c.index() as u64 + 1, name: c.name().into() })
        .collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for r in &m.regions {
        let split = m.splits.as_ref().and_then(|s| s.assignment.get(&r.region_id).copied());
        if only.is_some() && only != split {
            continue;
        }
        for (slot, e) in &r.slots {
            let image_id = images.len() as u64 + 1;
            images.push(CocoImage {
                id: image_id,
                file_name: e.image.clone(),
                width: e.size.map(|s| s[0]),
                height: e.size.map(|s| s[1]),
                region_id: r.region_id.clone(),
                slot: *slot,
                split,
            });
            for a in &e.annotations {
                let Some(b) = a.bbox else { continue };
                if a.status == AnnotationStatus::OutOfFov {
                    continue;
                }
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id,
                    category_id: a.label.index() as u64 + 1,
                    bbox: [b.x1, b.y1, b.width(), b.height()],
                    area: b.area(),
                    iscrowd: 0,
                });
            }
        }
    }
    CocoDataset { images, annotations, categories }
}
