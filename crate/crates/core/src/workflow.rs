//! Store-level batch operations shared by the command line and the service.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{Annotation, AnnotationSource, AnnotationStatus};
use crate::datastore::{RegionEntry, SlotEntry, Store, StoreError};
use crate::geom::{map_box, BBox};
use crate::imagecore::{read_image, write_png, ImageError, Raster};
use crate::scopemodel::{ProfileSet, ScopeError, Slot};
use crate::transfer::{run_chain, ChainOutcome, ChainParams, TransferError};
use crate::virtualscope::{oracle_homography, simulate_region, RegionParams, SimError, ViewSpec};

pub const SIMULATION_FILE: &str = "simulation.json";
pub const PROFILES_DIR: &str = "profiles";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> WorkflowError {
    WorkflowError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Runs `f` over `items` on up to `workers` threads; output order matches input.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Ground truth kept next to a simulated store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTruth {
    pub seed: u64,
    pub views: BTreeMap<Slot, ViewSpec>,
    pub truth: BTreeMap<Slot, Vec<Annotation>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub seed: u64,
    pub profiles: ProfileSet,
    pub regions: BTreeMap<String, RegionTruth>,
}

impl SimulationRecord {
    pub fn load(dir: &Path) -> Result<Self, WorkflowError> {
        let p = dir.join(SIMULATION_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&p, e))
    }
}

pub fn region_id(index: usize) -> String {
    format!("region-{index:04}")
}

/// Per-region simulator seed derived from the run seed.
pub fn region_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates `regions` regions into a new store: six PNG views per region,
/// expert annotations on the first chain slot, profiles and ground truth.
pub fn simulate_store(
    dir: &Path,
    seed: u64,
    regions: usize,
    profiles: &ProfileSet,
    params: &RegionParams,
    workers: usize,
) -> Result<(Store, SimulationRecord), WorkflowError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let indices: Vec<usize> = (0..regions).collect();
    let results = par_map(&indices, workers, |&i| -> Result<(RegionEntry, RegionTruth), WorkflowError> {
        let id = region_id(i);
        let rs = region_seed(seed, i);
        let sim = simulate_region(&id, rs, profiles, params)?;
        let mut slots = BTreeMap::new();
        for (slot, img) in &sim.images {
            let rel = format!("images/{id}/{}.png", slot.name());
            let path = dir.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| io_err(&path, e))?;
            write_png(img, &path)?;
            let stage = sim.views[slot].stage;
            let annotations = if *slot == Slot::CHAIN[0] { sim.truth[slot].clone() } else { Vec::new() };
            slots.insert(
                *slot,
                SlotEntry {
                    image: rel,
                    stage_mm: [stage.x_mm, stage.y_mm],
                    size: Some([img.width(), img.height()]),
                    annotations,
                },
            );
        }
        let truth = RegionTruth { seed: rs, views: sim.views, truth: sim.truth };
        Ok((RegionEntry { region_id: id, slots, transfers: Vec::new() }, truth))
    });
    let mut store = Store::default();
    let mut record = SimulationRecord { seed, profiles: profiles.clone(), regions: BTreeMap::new() };
    for r in results {
        let (entry, truth) = r?;
        record.regions.insert(entry.region_id.clone(), truth);
        store.manifest.upsert_region(entry);
    }
    profiles.save_dir(&dir.join(PROFILES_DIR))?;
    let p = dir.join(SIMULATION_FILE);
    let mut text = serde_json::to_string_pretty(&record).expect("serializable");
    text.push('\n');
    std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    store.save(dir)?;
    Ok((store, record))
}

/// Profiles stored with the store, else the built-in defaults.
pub fn store_profiles(dir: &Path) -> Result<ProfileSet, WorkflowError> {
    let p = dir.join(PROFILES_DIR);
    Ok(if p.is_dir() { ProfileSet::load_dir(&p)? } else { ProfileSet::defaults() })
}

/// Annotations on the first chain slot that seed a transfer.
pub fn chain_seed_annotations(entry: &RegionEntry) -> Result<Vec<Annotation>, StoreError> {
    Ok(entry
        .slot(Slot::CHAIN[0])?
        .annotations
        .iter()
        .filter(|a| a.bbox.is_some() && a.status != AnnotationStatus::OutOfFov)
        .filter(|a| matches!(a.source, AnnotationSource::Expert | AnnotationSource::Corrected))
        .cloned()
        .collect())
}

pub fn load_region_images(dir: &Path, entry: &RegionEntry) -> Result<BTreeMap<Slot, Raster>, WorkflowError> {
    entry.slots.iter().map(|(slot, e)| Ok((*slot, read_image(&Store::image_path(dir, e))?))).collect()
}

/// Digest of everything a transfer depends on: images, seed annotations,
/// profiles and parameters.
pub fn content_hash(
    dir: &Path,
    entry: &RegionEntry,
    profiles: &ProfileSet,
    params: &ChainParams,
) -> Result<String, WorkflowError> {
    let mut h = Sha256::new();
    for (slot, e) in &entry.slots {
        let p = Store::image_path(dir, e);
        h.update(slot.name().as_bytes());
        h.update(std::fs::read(&p).map_err(|err| io_err(&p, err))?);
    }
    h.update(serde_json::to_vec(&chain_seed_annotations(entry)?).expect("serializable"));
    h.update(serde_json::to_vec(profiles).expect("serializable"));
    h.update(serde_json::to_vec(params).expect("serializable"));
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs the chain on already-loaded inputs.
pub fn transfer_entry(
    entry: &RegionEntry,
    images: &BTreeMap<Slot, Raster>,
    profiles: &ProfileSet,
    params: &ChainParams,
) -> Result<ChainOutcome, WorkflowError> {
    let expert = chain_seed_annotations(entry)?;
    Ok(run_chain(&entry.region_id, images, &expert, profiles, params)?)
}

/// Writes chain results into a region: each destination slot's annotations
/// are replaced by the transferred set and the records are kept.
pub fn apply_outcome(entry: &mut RegionEntry, outcome: &ChainOutcome) {
    for r in &outcome.records {
        if let Some(slot) = entry.slots.get_mut(&r.dst.slot) {
            slot.annotations = r.annotations.clone();
        }
    }
    entry.transfers = outcome.records.clone();
}

/// Transfers the given regions of a store in place and saves it.
pub fn transfer_store(
    dir: &Path,
    store: &mut Store,
    region_ids: &[String],
    profiles: &ProfileSet,
    params: &ChainParams,
    workers: usize,
) -> Result<Vec<ChainOutcome>, WorkflowError> {
    let entries: Vec<RegionEntry> =
        region_ids.iter().map(|id| store.manifest.region(id).cloned()).collect::<Result<_, _>>()?;
    let outcomes = par_map(&entries, workers, |e| {
        let images = load_region_images(dir, e)?;
        transfer_entry(e, &images, profiles, params)
    });
    let mut done = Vec::new();
    for o in outcomes {
        let o = o?;
        apply_outcome(store.manifest.region_mut(&o.region_id)?, &o);
        done.push(o);
    }
    store.save(dir)?;
    Ok(done)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub region_id: String,
    pub slot: Slot,
    pub annotation: Annotation,
}

impl VerificationItem {
    /// `region:slot:annotation`, the reference used by the service.
    pub fn reference(&self) -> String {
        format!("{}:{}:{}", self.region_id, self.slot, self.annotation.id)
    }
}

/// Annotations waiting for review, by region, chain position, then
/// descending area.
pub fn verification_items(store: &Store) -> Vec<VerificationItem> {
    let mut items = Vec::new();
    for r in &store.manifest.regions {
        for (slot, e) in &r.slots {
            let mut here: Vec<&Annotation> =
                e.annotations.iter().filter(|a| a.status == AnnotationStatus::NeedsReview).collect();
            here.sort_by(|a, b| b.area().total_cmp(&a.area()));
            items.extend(here.into_iter().map(|a| VerificationItem {
                region_id: r.region_id.clone(),
                slot: *slot,
                annotation: a.clone(),
            }));
        }
    }
    items
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeEval {
    pub src: Slot,
    pub dst: Slot,
    /// Ground-truth cells in view at the destination.
    pub compared: usize,
    /// Of those, how many had no in-view transferred box.
    pub missed: usize,
    pub median_iou: f64,
    pub mean_iou: f64,
    pub min_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Regions with at least one transfer record.
    pub regions: usize,
    /// Simulated regions that have not been transferred; not scored.
    pub untransferred: Vec<String>,
    /// Regions whose chain stopped before the last slot.
    pub halted: Vec<String>,
    pub edges: Vec<EdgeEval>,
    /// Seed cells whose true center falls outside the last view.
    pub leaving: usize,
    /// Of those, how many were flagged out of view.
    pub leaving_flagged: usize,
    /// In-view seed cells wrongly flagged out of view at the last slot.
    pub wrongly_flagged: usize,
}

fn summarize(src: Slot, dst: Slot, mut ious: Vec<f64>, missed: usize) -> EdgeEval {
    ious.sort_by(f64::total_cmp);
    let n = ious.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => ious[n / 2],
        _ => 0.5 * (ious[n / 2 - 1] + ious[n / 2]),
    };
    EdgeEval {
        src,
        dst,
        compared: n,
        missed,
        median_iou: median,
        mean_iou: if n == 0 { f64::NAN } else { ious.iter().sum::<f64>() / n as f64 },
        min_iou: ious.first().copied().unwrap_or(f64::NAN),
    }
}

/// IoU of transferred boxes against simulator truth, per chain edge.
pub fn evaluate_transfer(store: &Store, sim: &SimulationRecord) -> Result<EvalReport, WorkflowError> {
    let mut per_edge: BTreeMap<(Slot, Slot), (Vec<f64>, usize)> = BTreeMap::new();
    let (mut leaving, mut flagged, mut wrongly) = (0, 0, 0);
    let mut halted = Vec::new();
    let mut untransferred = Vec::new();
    let mut regions = 0;
    let first = Slot::CHAIN[0];
    let last = Slot::CHAIN[Slot::CHAIN.len() - 1];
    for entry in &store.manifest.regions {
        let Some(truth) = sim.regions.get(&entry.region_id) else { continue };
        if entry.transfers.is_empty() {
            untransferred.push(entry.region_id.clone());
            continue;
        }
        regions += 1;
        let seed_ids: Vec<String> = chain_seed_annotations(entry)?.into_iter().map(|a| a.id).collect();
        for rec in &entry.transfers {
            let view = &truth.views[&rec.dst.slot];
            let size = view.out_size;
            let bounds = BBox::image_bounds(size[0], size[1]);
            let slot = per_edge.entry((rec.src.slot, rec.dst.slot)).or_default();
            for t in truth.truth.get(&rec.dst.slot).into_iter().flatten() {
                let Some(g) = t.geometry() else { continue };
                if !seed_ids.contains(&t.id) || !bounds.contains(g.center()) {
                    continue;
                }
                let got = rec
                    .annotations
                    .iter()
                    .find(|a| a.id == t.id && a.status != AnnotationStatus::OutOfFov)
                    .and_then(|a| a.bbox);
                match (got, t.bbox) {
                    (Some(b), Some(tb)) => slot.0.push(b.iou(&tb)),
                    _ => {
                        slot.0.push(0.0);
                        slot.1 += 1;
                    }
                }
            }
        }
        let finished = entry.transfers.last().is_some_and(|r| r.dst.slot == last);
        if !finished {
            halted.push(entry.region_id.clone());
            continue;
        }
        let o = oracle_homography(&truth.views[&first], &truth.views[&last], &sim.profiles)?;
        let size = truth.views[&last].out_size;
        let bounds = BBox::image_bounds(size[0], size[1]);
        let final_rec = entry.transfers.last().expect("finished");
        for a in chain_seed_annotations(entry)? {
            let Some(g) = a.geometry() else { continue };
            let inside = map_box(&o, &g).is_ok_and(|m| bounds.contains(m.center()));
            let out = final_rec.annotations.iter().find(|x| x.id == a.id).is_none_or(|x| x.status == AnnotationStatus::OutOfFov);
            if !inside {
                leaving += 1;
                flagged += usize::from(out);
            } else if out {
                wrongly += 1;
            }
        }
    }
    let edges = Slot::CHAIN
        .windows(2)
        .filter_map(|w| per_edge.remove(&(w[0], w[1])).map(|(ious, missed)| summarize(w[0], w[1], ious, missed)))
        .collect();
    Ok(EvalReport { regions, untransferred, halted, edges, leaving, leaving_flagged: flagged, wrongly_flagged: wrongly })
}
