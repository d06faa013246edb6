//! Region registry, annotation manifests, corrections with an audit trail,
//! correspondence-consistent dataset splits and COCO export.
//!
//! A store is a directory holding `manifest.json`, `audit.json` and the
//! images the manifest points at (paths relative to the store root).

mod coco;
mod edit;
mod split;

pub use coco::{export_coco, image_splits, CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
pub use edit::{apply_correction, replay, AnnotationEdit, AuditEntry};
pub use split::{generate_splits, split_sizes, RegionSummary, Split, SplitManifest, SplitReport, DEFAULT_CLASS_TOLERANCE, PAPER_FRACTIONS};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Annotation, AnnotationStatus, CellClass};
use crate::scopemodel::Slot;
use crate::transfer::TransferRecord;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUDIT_FILE: &str = "audit.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("duplicate region `{0}`")]
    DuplicateRegion(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("region `{region}` has no slot {slot}")]
    UnknownSlot { region: String, slot: Slot },
    #[error("no annotation `{id}` in {region}/{slot}")]
    UnknownAnnotation { region: String, slot: Slot, id: String },
    #[error("duplicate annotation `{id}` in {region}/{slot}")]
    DuplicateAnnotation { region: String, slot: Slot, id: String },
    #[error("annotation `{0}` has no box to edit")]
    NoGeometry(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("invalid split request: {0}")]
    InvalidSplit(String),
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    /// Image path relative to the store root.
    pub image: String,
    /// Stage reading when the image was captured.
    pub stage_mm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub region_id: String,
    pub slots: BTreeMap<Slot, SlotEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfers: Vec<TransferRecord>,
}

impl RegionEntry {
    pub fn is_complete(&self) -> bool {
        Slot::CHAIN.iter().all(|s| self.slots.contains_key(s))
    }

    /// Cell instances per class over all slots, ignoring annotations that
    /// are outside the view or have no box.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for a in self.slots.values().flat_map(|s| &s.annotations) {
            if a.bbox.is_some() && a.status != AnnotationStatus::OutOfFov {
                c[a.label.index()] += 1;
            }
        }
        c
    }

    pub fn slot(&self, slot: Slot) -> Result<&SlotEntry, StoreError> {
        self.slots.get(&slot).ok_or_else(|| StoreError::UnknownSlot { region: self.region_id.clone(), slot })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub regions: Vec<RegionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitManifest>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { version: MANIFEST_VERSION, regions: Vec::new(), splits: None }
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.version != MANIFEST_VERSION {
            return Err(StoreError::Version(self.version));
        }
        let mut ids = BTreeSet::new();
        for r in &self.regions {
            if !ids.insert(r.region_id.as_str()) {
                return Err(StoreError::DuplicateRegion(r.region_id.clone()));
            }
            for (slot, e) in &r.slots {
                let mut seen = BTreeSet::new();
                for a in &e.annotations {
                    if !seen.insert(a.id.as_str()) {
                        return Err(StoreError::DuplicateAnnotation {
                            region: r.region_id.clone(),
                            slot: *slot,
                            id: a.id.clone(),
                        });
                    }
                }
            }
        }
        if let Some(s) = &self.splits {
            if let Some(id) = s.assignment.keys().find(|k| !ids.contains(k.as_str())) {
                return Err(StoreError::UnknownRegion(id.clone()));
            }
        }
        Ok(())
    }

    pub fn region(&self, id: &str) -> Result<&RegionEntry, StoreError> {
        self.regions.iter().find(|r| r.region_id == id).ok_or_else(|| StoreError::UnknownRegion(id.into()))
    }

    pub fn region_mut(&mut self, id: &str) -> Result<&mut RegionEntry, StoreError> {
        self.regions.iter_mut().find(|r| r.region_id == id).ok_or_else(|| StoreError::UnknownRegion(id.into()))
    }

    /// Adds or replaces a region, keeping regions ordered by id.
    pub fn upsert_region(&mut self, entry: RegionEntry) {
        match self.regions.binary_search_by(|r| r.region_id.as_str().cmp(&entry.region_id)) {
            Ok(i) => self.regions[i] = entry,
            Err(i) => self.regions.insert(i, entry),
        }
    }

    pub fn summaries(&self) -> Vec<RegionSummary> {
        self.regions
            .iter()
            .map(|r| RegionSummary { region_id: r.region_id.clone(), class_counts: r.class_counts() })
            .collect()
    }

    pub fn to_json(&self) -> String {
        to_pretty(self)
    }
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("store types serialize");
    s.push('\n');
    s
}

/// Parses a manifest, reporting schema violations with their JSON path.
pub fn parse_manifest(text: &str) -> Result<Manifest, StoreError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| StoreError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<(), StoreError> {
    m.validate()?;
    write_atomic(path, &m.to_json())
}

pub fn load_manifest(path: &Path) -> Result<Manifest, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_manifest(&text)
}

/// A manifest together with its correction history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Store {
    pub manifest: Manifest,
    pub audit: Vec<AuditEntry>,
}

impl Store {
    pub fn new(manifest: Manifest) -> Self {
        Self { manifest, audit: Vec::new() }
    }

    /// Opens a store directory; a missing manifest yields an empty store.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = if mpath.exists() { load_manifest(&mpath)? } else { Manifest::default() };
        let apath = dir.join(AUDIT_FILE);
        let audit = if apath.exists() {
            let text = std::fs::read_to_string(&apath).map_err(|e| io_err(&apath, e))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| StoreError::Schema {
                path: format!("{AUDIT_FILE}:{}", e.path()),
                message: e.inner().to_string(),
            })?
        } else {
            Vec::new()
        };
        Ok(Self { manifest, audit })
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        save_manifest(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_atomic(&dir.join(AUDIT_FILE), &to_pretty(&self.audit))
    }

    pub fn image_path(dir: &Path, entry: &SlotEntry) -> PathBuf {
        dir.join(&entry.image)
    }

    pub fn correct(
        &mut self,
        region_id: &str,
        slot: Slot,
        edit: &AnnotationEdit,
        who: &str,
        when: &str,
    ) -> Result<AuditEntry, StoreError> {
        let entry = apply_correction(&mut self.manifest, region_id, slot, edit, who, when, self.audit.len() as u64)?;
        self.audit.push(entry.clone());
        Ok(entry)
    }
}

/// Labels known to the store, in category order.
pub fn categories() -> [CellClass; 4] {
    CellClass::ALL
}
