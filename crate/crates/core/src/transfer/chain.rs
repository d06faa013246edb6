use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    register_pair, transfer_annotations, Confidence, ImageRef, RegistrationParams, TransferError,
    TransferRecord,
};
use crate::annotation::{Annotation, AnnotationStatus};
use crate::imagecore::Raster;
use crate::scopemodel::{ProfileSet, ScopeError, Slot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub registration: RegistrationParams,
    pub clip_margin: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { registration: RegistrationParams::default(), clip_margin: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub src: Slot,
    pub dst: Slot,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub region_id: String,
    pub records: Vec<TransferRecord>,
    /// The edge that failed to register, if the chain halted early.
    pub halted: Option<ChainFailure>,
}

/// Sampling-density ratio of an edge and the optical blur of each end.
fn edge_geometry(profiles: &ProfileSet, src: Slot, dst: Slot) -> Result<(f64, [f64; 2]), ScopeError> {
    let ps = profiles.get(src.microscope_id())?;
    let pd = profiles.get(dst.microscope_id())?;
    let a = ps.at(src.magnification())?.px_per_mm;
    let b = pd.at(dst.magnification())?.px_per_mm;
    Ok((b / a, [ps.degradation.blur_sigma, pd.degradation.blur_sigma]))
}

/// Runs the five chain edges in order. A low-confidence edge lowers every
/// later edge to low confidence; a registration failure stops the chain and
/// returns the records produced so far.
pub fn run_chain(
    region_id: &str,
    images: &BTreeMap<Slot, Raster>,
    expert: &[Annotation],
    profiles: &ProfileSet,
    params: &ChainParams,
) -> Result<ChainOutcome, TransferError> {
    for slot in Slot::CHAIN {
        if !images.contains_key(&slot) {
            return Err(TransferError::MissingImage(slot));
        }
    }
    let mut records = Vec::new();
    let mut carried: Vec<Annotation> = expert.to_vec();
    let mut poisoned = false;
    for edge in Slot::CHAIN.windows(2) {
        let (s, d) = (edge[0], edge[1]);
        let (src, dst) = (&images[&s], &images[&d]);
        let registered = edge_geometry(profiles, s, d)
            .map_err(|e| e.to_string())
            .and_then(|(scale, blur)| {
                let reg = RegistrationParams { blur_sigma_px: blur, ..params.registration.clone() };
                register_pair(src, dst, scale, &reg).map_err(|e| e.to_string())
            });
        let (h, diag) = match registered {
            Ok(v) => v,
            Err(error) => {
                log::warn!("{region_id}: edge {s} -> {d} failed: {error}");
                return Ok(ChainOutcome {
                    region_id: region_id.to_string(),
                    records,
                    halted: Some(ChainFailure { src: s, dst: d, error }),
                });
            }
        };
        let own = Confidence::classify(diag.match_count, diag.inlier_ratio, diag.mean_inlier_error);
        poisoned |= own == Confidence::Low;
        let confidence = if poisoned { Confidence::Low } else { Confidence::High };
        let annotations = transfer_annotations(
            &carried,
            &h,
            [dst.width(), dst.height()],
            confidence,
            params.clip_margin,
        );
        carried = annotations
            .iter()
            .filter(|a| a.status != AnnotationStatus::OutOfFov)
            .cloned()
            .collect();
        records.push(TransferRecord {
            src: ImageRef::new(region_id, s),
            dst: ImageRef::new(region_id, d),
            homography: h,
            match_count: diag.match_count,
            inlier_ratio: diag.inlier_ratio,
            mean_inlier_error: diag.mean_inlier_error,
            confidence,
            annotations,
        });
    }
    Ok(ChainOutcome { region_id: region_id.to_string(), records, halted: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: String,
    pub chain_position: usize,
    pub annotation: Annotation,
}

/// Every `needs_review` annotation, by chain position then descending area.
pub fn verification_queue(records: &[TransferRecord]) -> Vec<QueueEntry> {
    let mut q: Vec<QueueEntry> = records
        .iter()
        .flat_map(|r| {
            let pos = r.dst.slot.chain_position();
            r.annotations
                .iter()
                .filter(|a| a.status == AnnotationStatus::NeedsReview)
                .map(move |a| QueueEntry {
                    image_id: r.dst.image_id.clone(),
                    chain_position: pos,
                    annotation: a.clone(),
                })
        })
        .collect();
    q.sort_by(|a, b| {
        a.chain_position
            .cmp(&b.chain_position)
            .then(b.annotation.area().total_cmp(&a.annotation.area()))
    });
    q
}
