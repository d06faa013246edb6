use slidereg_core::datastore::{AnnotationEdit, Store, MANIFEST_FILE};
use slidereg_core::transfer::ChainParams;
use slidereg_core::virtualscope::RegionParams;
use slidereg_core::workflow::*;
use slidereg_core::{ProfileSet, Slot};

#[test]
fn simulate_transfer_evaluate_verify() {
    let ps = ProfileSet::ideal();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (mut store, sim) = simulate_store(a.path(), 11, 2, &ps, &RegionParams::default(), 2).unwrap();
    simulate_store(b.path(), 11, 2, &ps, &RegionParams::default(), 1).unwrap();
    let read = |d: &std::path::Path| std::fs::read_to_string(d.join(MANIFEST_FILE)).unwrap();
    assert!(read(a.path()) == read(b.path()), "simulated manifests differ");
    assert_eq!(store.manifest.regions.len(), 2);
    assert!(store.manifest.regions.iter().all(|r| r.is_complete()));
    assert_eq!(store_profiles(a.path()).unwrap(), ps);

    let ids: Vec<String> = store.manifest.regions.iter().map(|r| r.region_id.clone()).collect();
    let entry = store.manifest.region(&ids[0]).unwrap().clone();
    let h1 = content_hash(a.path(), &entry, &ps, &ChainParams::default()).unwrap();
    let outcomes = transfer_store(a.path(), &mut store, &ids, &ps, &ChainParams::default(), 2).unwrap();
    assert!(outcomes.iter().all(|o| o.halted.is_none() && o.records.len() == 5));
    let h2 = content_hash(a.path(), &entry, &ps, &ChainParams::default()).unwrap();
    assert_eq!(h1, h2);

    let mut other = Store::open(b.path()).unwrap();
    transfer_store(b.path(), &mut other, &ids, &ps, &ChainParams::default(), 1).unwrap();
    assert!(read(a.path()) == read(b.path()), "transfer output differs between runs");

    let report = evaluate_transfer(&store, &sim).unwrap();
    assert_eq!(report.edges.len(), 5);
    for e in &report.edges {
        assert!(e.median_iou >= 0.9, "{e:?}");
    }
    assert_eq!(report.leaving, report.leaving_flagged);
    assert_eq!(report.wrongly_flagged, 0);

    let queue = verification_items(&store);
    if let Some(first) = queue.first() {
        let edit = AnnotationEdit::Accept { id: first.annotation.id.clone() };
        store.correct(&first.region_id, first.slot, &edit, "op", "2024-01-01T00:00:00Z").unwrap();
        assert_eq!(verification_items(&store).len(), queue.len() - 1);
        assert_eq!(first.reference().split(':').count(), 3);
    }
    assert!(store.manifest.regions[0].slots[&Slot::Lcm1000].annotations.iter().all(|a| a.bbox.is_some()
        || a.status != slidereg_core::AnnotationStatus::Confirmed));
}
