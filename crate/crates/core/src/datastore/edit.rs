//! Operator corrections and their append-only audit trail.

use serde::{Deserialize, Serialize};

use super::{Manifest, StoreError};
use crate::annotation::{Annotation, AnnotationSource, AnnotationStatus, CellClass};
use crate::geom::BBox;
use crate::scopemodel::Slot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AnnotationEdit {
    /// Confirms an annotation unchanged.
    Accept { id: String },
    Move { id: String, dx: f64, dy: f64 },
    Resize {
        id: String,
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Relabel { id: String, label: CellClass },
    Add {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        #[serde(rename = "box")]
        bbox: BBox,
        label: CellClass,
    },
    Delete { id: String },
}

impl AnnotationEdit {
    fn target(&self) -> Option<&str> {
        match self {
            AnnotationEdit::Accept { id }
            | AnnotationEdit::Move { id, .. }
            | AnnotationEdit::Resize { id, .. }
            | AnnotationEdit::Relabel { id, .. }
            | AnnotationEdit::Delete { id } => Some(id),
            AnnotationEdit::Add { id, .. } => id.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub region_id: String,
    pub slot: Slot,
    pub who: String,
    pub when: String,
    pub edit: AnnotationEdit,
    pub annotation_id: String,
    pub before: Option<Annotation>,
    pub after: Option<Annotation>,
}

fn check_box(b: &BBox) -> Result<(), StoreError> {
    let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
    if finite && b.x2 > b.x1 && b.y2 > b.y1 {
        Ok(())
    } else {
        Err(StoreError::InvalidEdit(format!("degenerate box {:?}", <[f64; 4]>::from(*b))))
    }
}

fn next_id(existing: &[Annotation]) -> String {
    (1..)
        .map(|k| format!("m{k}"))
        .find(|c| existing.iter().all(|a| &a.id != c))
        .expect("unbounded")
}

/// Applies one edit in place and returns the matching audit entry.
pub fn apply_correction(
    m: &mut Manifest,
    region_id: &str,
    slot: Slot,
    edit: &AnnotationEdit,
    who: &str,
    when: &str,
    seq: u64,
) -> Result<AuditEntry, StoreError> {
    let region = m.region_mut(region_id)?;
    let entry = region
        .slots
        .get_mut(&slot)
        .ok_or_else(|| StoreError::UnknownSlot { region: region_id.into(), slot })?;
    let anns = &mut entry.annotations;
    let unknown = |id: &str| StoreError::UnknownAnnotation { region: region_id.into(), slot, id: id.into() };

    if let AnnotationEdit::Add { bbox, .. } | AnnotationEdit::Resize { bbox, .. } = edit {
        check_box(bbox)?;
    }
    let (id, before, after) = if let AnnotationEdit::Add { id, bbox, label } = edit {
        let id = match id {
            Some(id) if anns.iter().any(|a| &a.id == id) => {
                return Err(StoreError::DuplicateAnnotation { region: region_id.into(), slot, id: id.clone() })
            }
            Some(id) => id.clone(),
            None => next_id(anns),
        };
        let mut a = Annotation::expert(id.clone(), *bbox, *label);
        a.source = AnnotationSource::Corrected;
        anns.push(a.clone());
        (id, None, Some(a))
    } else {
        let id = edit.target().expect("non-add edits name a target");
        let idx = anns.iter().position(|a| a.id == id).ok_or_else(|| unknown(id))?;
        let before = anns[idx].clone();
        if let AnnotationEdit::Delete { .. } = edit {
            anns.remove(idx);
            (id.to_string(), Some(before), None)
        } else {
            let a = &mut anns[idx];
            match edit {
                AnnotationEdit::Accept { .. } => {
                    if a.bbox.is_none() {
                        return Err(StoreError::NoGeometry(id.into()));
                    }
                }
                AnnotationEdit::Move { dx, dy, .. } => {
                    if !(dx.is_finite() && dy.is_finite()) {
                        return Err(StoreError::InvalidEdit("non-finite offset".into()));
                    }
                    let b = a.bbox.ok_or_else(|| StoreError::NoGeometry(id.into()))?;
                    a.bbox = Some(b.translated(*dx, *dy));
                    a.full_box = None;
                    a.truncated = false;
                    a.source = AnnotationSource::Corrected;
                }
                AnnotationEdit::Resize { bbox, .. } => {
                    a.bbox = Some(*bbox);
                    a.full_box = None;
                    a.truncated = false;
                    a.source = AnnotationSource::Corrected;
                }
                AnnotationEdit::Relabel { label, .. } => {
                    a.label = *label;
                    a.source = AnnotationSource::Corrected;
                }
                AnnotationEdit::Add { .. } | AnnotationEdit::Delete { .. } => unreachable!(),
            }
            a.status = AnnotationStatus::Confirmed;
            (id.to_string(), Some(before), Some(a.clone()))
        }
    };
    Ok(AuditEntry {
        seq,
        region_id: region_id.into(),
        slot,
        who: who.into(),
        when: when.into(),
        edit: edit.clone(),
        annotation_id: id,
        before,
        after,
    })
}

/// Re-applies an audit trail to a baseline manifest.
pub fn replay(baseline: &Manifest, audit: &[AuditEntry]) -> Result<Manifest, StoreError> {
    let mut m = baseline.clone();
    for e in audit {
        apply_correction(&mut m, &e.region_id, e.slot, &e.edit, &e.who, &e.when, e.seq)?;
    }
    Ok(m)
}
