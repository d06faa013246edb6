//! Pairwise registration and chained annotation transfer.
//!
//! Boxes travel HCM 1000x -> 400x -> 100x -> LCM 100x -> 400x -> 1000x. Each
//! edge registers its two images, maps the surviving boxes and classifies them
//! as confirmed, needing review, or outside the destination field of view.

mod chain;
mod direct;
mod register;

pub use chain::{run_chain, verification_queue, ChainFailure, ChainOutcome, ChainParams, QueueEntry};
pub use register::{register_pair, PhotometricDiagnostics, RegistrationDiagnostics, RegistrationParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, AnnotationSource, AnnotationStatus};
use crate::features::FeatureError;
use crate::geom::{map_box, BBox, GeomError, Homography};
use crate::scopemodel::{Magnification, Slot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("only {found} descriptor matches; at least {needed} required")]
    TooFewMatches { found: usize, needed: usize },
    #[error("homography estimation failed: {0}")]
    Estimation(#[from] GeomError),
    #[error("feature extraction failed: {0}")]
    Features(#[from] FeatureError),
    #[error("expected scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("missing image for slot {0}")]
    MissingImage(Slot),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Low,
}

/// Minimum match count for a high-confidence edge.
pub const HIGH_MIN_MATCHES: usize = 15;
/// Minimum inlier ratio for a high-confidence edge.
pub const HIGH_MIN_INLIER_RATIO: f64 = 0.5;
/// Maximum mean inlier error, in matching-resolution pixels.
pub const HIGH_MAX_MEAN_ERROR: f64 = 3.0;

impl Confidence {
    pub fn classify(match_count: usize, inlier_ratio: f64, mean_inlier_error: f64) -> Self {
        if match_count >= HIGH_MIN_MATCHES
            && inlier_ratio >= HIGH_MIN_INLIER_RATIO
            && mean_inlier_error <= HIGH_MAX_MEAN_ERROR
        {
            Confidence::High
        } else {
            Confidence::Low
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub slot: Slot,
    pub microscope: String,
    pub magnification: Magnification,
    pub image_id: String,
}

impl ImageRef {
    pub fn new(region_id: &str, slot: Slot) -> Self {
        Self {
            slot,
            microscope: slot.microscope_id().to_string(),
            magnification: slot.magnification(),
            image_id: format!("{region_id}/{}", slot.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub src: ImageRef,
    pub dst: ImageRef,
    /// Original source pixels to original destination pixels.
    pub homography: Homography,
    pub match_count: usize,
    pub inlier_ratio: f64,
    pub mean_inlier_error: f64,
    pub confidence: Confidence,
    pub annotations: Vec<Annotation>,
}

/// Maps boxes through `h` into a `dst_size` image and assigns status.
///
/// The unclipped geometry (`full_box` when present) is what gets mapped, so
/// clipping never compounds along a chain. Boxes whose mapped center leaves
/// the image are `out_of_fov` and keep their unclipped mapped box. Boxes that
/// come within `clip_margin` px of the border are clipped and sent to review.
pub fn transfer_annotations(
    annotations: &[Annotation],
    h: &Homography,
    dst_size: [usize; 2],
    confidence: Confidence,
    clip_margin: f64,
) -> Vec<Annotation> {
    let bounds = BBox::image_bounds(dst_size[0], dst_size[1]);
    let safe = BBox::new(
        bounds.x1 + clip_margin,
        bounds.y1 + clip_margin,
        bounds.x2 - clip_margin,
        bounds.y2 - clip_margin,
    );
    annotations
        .iter()
        .map(|a| {
            let mut out = Annotation {
                id: a.id.clone(),
                bbox: None,
                label: a.label,
                source: AnnotationSource::Transferred,
                status: AnnotationStatus::NeedsReview,
                full_box: None,
                truncated: false,
            };
            let Some(mapped) = a.geometry().and_then(|g| map_box(h, &g).ok()) else {
                return out;
            };
            if !mapped.area().is_finite() || mapped.area() <= 0.0 {
                return out;
            }
            if !bounds.contains(mapped.center()) {
                out.bbox = Some(mapped);
                out.status = AnnotationStatus::OutOfFov;
                return out;
            }
            let inside = mapped.x1 >= safe.x1 && mapped.y1 >= safe.y1 && mapped.x2 <= safe.x2 && mapped.y2 <= safe.y2;
            if inside {
                out.bbox = Some(mapped);
                if confidence == Confidence::High {
                    out.status = AnnotationStatus::Confirmed;
                }
            } else {
                out.bbox = mapped.intersection(&bounds);
                out.full_box = Some(mapped);
                out.truncated = out.bbox.is_none_or(|b| b.area() < mapped.area() - 1e-9);
                if !out.truncated {
                    out.full_box = None;
                }
            }
            out
        })
        .collect()
}

/// Largest disagreement between an estimated and a reference homography at
/// the corners of the region both images share, in destination pixels.
pub fn overlap_corner_error(
    estimated: &Homography,
    reference: &Homography,
    src_size: [usize; 2],
    dst_size: [usize; 2],
) -> Result<f64, GeomError> {
    let src_in_dst = map_box(reference, &BBox::image_bounds(src_size[0], src_size[1]))?;
    let overlap = src_in_dst
        .intersection(&BBox::image_bounds(dst_size[0], dst_size[1]))
        .ok_or(GeomError::EstimationFailed)?;
    let back = reference.inverse()?;
    let mut worst = 0f64;
    for c in overlap.corners() {
        let p = back.map_point(c)?;
        worst = worst.max(estimated.map_point(p)?.distance(c));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::CellClass;
    use proptest::prelude::*;

    fn ann(id: &str, b: BBox) -> Annotation {
        Annotation::expert(id, b, CellClass::Ring)
    }

    #[test]
    fn identity_inside_is_confirmed() {
        let a = ann("a", BBox::new(100.0, 100.0, 140.0, 150.0));
        let out = transfer_annotations(std::slice::from_ref(&a), &Homography::identity(), [1024, 768], Confidence::High, 2.0);
        assert_eq!(out[0].bbox, a.bbox);
        assert_eq!(out[0].status, AnnotationStatus::Confirmed);
        assert_eq!(out[0].source, AnnotationSource::Transferred);
    }

    #[test]
    fn low_confidence_all_review() {
        let boxes: Vec<Annotation> = (0..4)
            .map(|i| ann(&i.to_string(), BBox::new(100.0 + 50.0 * i as f64, 100.0, 130.0 + 50.0 * i as f64, 130.0)))
            .collect();
        let out = transfer_annotations(&boxes, &Homography::identity(), [1024, 768], Confidence::Low, 2.0);
        assert!(out.iter().all(|a| a.status == AnnotationStatus::NeedsReview));
    }

    #[test]
    fn cropped_fov_drops_border_boxes() {
        // HCM 100x -> LCM 100x with crop 0.8: same center, 1.25x denser.
        let w = 1024.0;
        let c = (w - 1.0) / 2.0;
        let h = Homography::similarity(1.25, 0.0, c - 1.25 * c, 383.5 - 1.25 * 383.5);
        let near_border = ann("edge", BBox::new(20.0, 300.0, 27.0, 307.0));
        let central = ann("mid", BBox::new(500.0, 380.0, 507.0, 387.0));
        let out = transfer_annotations(&[near_border, central], &h, [1024, 768], Confidence::High, 2.0);
        assert_eq!(out[0].status, AnnotationStatus::OutOfFov);
        assert!(out[0].bbox.is_some());
        assert_eq!(out[1].status, AnnotationStatus::Confirmed);
    }

    #[test]
    fn border_straddler_is_clipped() {
        let a = ann("s", BBox::new(-10.0, 100.0, 20.0, 130.0));
        let out = transfer_annotations(&[a], &Homography::identity(), [1024, 768], Confidence::High, 2.0);
        assert_eq!(out[0].status, AnnotationStatus::NeedsReview);
        assert!(out[0].truncated);
        assert_eq!(out[0].bbox.unwrap().x1, -0.5);
        assert_eq!(out[0].full_box.unwrap().x1, -10.0);
    }

    #[test]
    fn degenerate_mapping_keeps_annotation() {
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.002, 0.0, 1.0]];
        m[2][0] = -0.01;
        let h = Homography::new(m).unwrap();
        // The box straddles the line at infinity x = 100.
        let a = ann("z", BBox::new(90.0, 10.0, 110.0, 20.0));
        let out = transfer_annotations(&[a], &h, [1024, 768], Confidence::High, 2.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].status, AnnotationStatus::NeedsReview);
    }

    proptest! {
        #[test]
        fn count_conserved_and_idempotent(
            boxes in prop::collection::vec((-50.0f64..1050.0, -50.0f64..800.0, 2.0f64..80.0, 2.0f64..80.0), 0..30),
            tx in -300.0f64..300.0, ty in -300.0f64..300.0, s in 0.5f64..2.0,
            high in any::<bool>(),
        ) {
            let anns: Vec<Annotation> = boxes.iter().enumerate()
                .map(|(i, &(x, y, w, h))| ann(&i.to_string(), BBox::new(x, y, x + w, y + h)))
                .collect();
            let conf = if high { Confidence::High } else { Confidence::Low };
            let h = Homography::similarity(s, 0.0, tx, ty);
            let out = transfer_annotations(&anns, &h, [1024, 768], conf, 2.0);
            prop_assert_eq!(out.len(), anns.len());
            let counted = out.iter().filter(|a| matches!(a.status,
                AnnotationStatus::Confirmed | AnnotationStatus::NeedsReview | AnnotationStatus::OutOfFov)).count();
            prop_assert_eq!(counted, anns.len());

            let id = Homography::identity();
            let once = transfer_annotations(&anns, &id, [1024, 768], Confidence::High, 2.0);
            let twice = transfer_annotations(&once, &id, [1024, 768], Confidence::High, 2.0);
            prop_assert_eq!(once, twice);
        }
    }
}
