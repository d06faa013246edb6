use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene_with, render_view, view_truth, SceneParams, SimError, SlideScene, ViewSpec};
use crate::annotation::Annotation;
use crate::imagecore::Raster;
use crate::scopemodel::{ProfileSet, Slot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub scene: SceneParams,
    /// Maximum offset of each slot's view center from the HCM 1000x center,
    /// per axis, in mm. HCM 1000x itself is the anchor.
    pub jitter_mm: BTreeMap<Slot, [f64; 2]>,
    /// Maximum offset of the anchor from the scene center.
    pub anchor_jitter_mm: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        let jitter_mm = BTreeMap::from([
            (Slot::Hcm1000, [0.0, 0.0]),
            (Slot::Hcm400, [0.03, 0.02]),
            (Slot::Hcm100, [0.2, 0.15]),
            (Slot::Lcm100, [0.15, 0.1]),
            (Slot::Lcm400, [0.02, 0.015]),
            (Slot::Lcm1000, [0.012, 0.009]),
        ]);
        Self { scene: SceneParams::default(), jitter_mm, anchor_jitter_mm: 0.03 }
    }
}

/// One region imaged at all six slots, with per-slot ground truth.
#[derive(Clone, Debug)]
pub struct SimulatedRegion {
    pub region_id: String,
    pub scene: SlideScene,
    pub views: BTreeMap<Slot, ViewSpec>,
    pub images: BTreeMap<Slot, Raster>,
    pub truth: BTreeMap<Slot, Vec<Annotation>>,
}

/// Generates a scene and places the six slot views around a common anchor,
/// the way an operator re-finds a region on each objective and microscope.
pub fn region_layout(
    seed: u64,
    profiles: &ProfileSet,
    params: &RegionParams,
) -> Result<(SlideScene, BTreeMap<Slot, ViewSpec>), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_scene_with(rng.gen(), &params.scene)?;
    let j = params.anchor_jitter_mm;
    let anchor = [
        params.scene.extent_mm[0] / 2.0 + rng.gen_range(-j..=j),
        params.scene.extent_mm[1] / 2.0 + rng.gen_range(-j..=j),
    ];
    let mut views = BTreeMap::new();
    for slot in Slot::CHAIN {
        let [jx, jy] = params.jitter_mm.get(&slot).copied().unwrap_or([0.0, 0.0]);
        let dx = if jx > 0.0 { rng.gen_range(-jx..=jx) } else { 0.0 };
        let dy = if jy > 0.0 { rng.gen_range(-jy..=jy) } else { 0.0 };
        let spec = ViewSpec::centered_on(
            slot.microscope_id(),
            slot.magnification(),
            [anchor[0] + dx, anchor[1] + dy],
            profiles,
        )?;
        views.insert(slot, spec);
    }
    Ok((scene, views))
}

/// Ground truth of every slot of a region, without rendering pixels.
pub fn region_truth(
    seed: u64,
    profiles: &ProfileSet,
    params: &RegionParams,
) -> Result<BTreeMap<Slot, Vec<Annotation>>, SimError> {
    let (scene, views) = region_layout(seed, profiles, params)?;
    views.iter().map(|(slot, spec)| Ok((*slot, view_truth(&scene, spec, profiles)?))).collect()
}

/// [`region_layout`] plus a rendered image and ground truth per slot.
pub fn simulate_region(
    region_id: &str,
    seed: u64,
    profiles: &ProfileSet,
    params: &RegionParams,
) -> Result<SimulatedRegion, SimError> {
    let (scene, views) = region_layout(seed, profiles, params)?;
    let mut images = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (slot, spec) in &views {
        let (img, gt) = render_view(&scene, spec, profiles)?;
        images.insert(*slot, img);
        truth.insert(*slot, gt);
    }
    Ok(SimulatedRegion { region_id: region_id.to_string(), scene, views, images, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::virtualscope::oracle_homography;

    #[test]
    fn chain_views_overlap_and_are_deterministic() {
        let ps = ProfileSet::defaults();
        let a = simulate_region("r0", 3, &ps, &RegionParams::default()).unwrap();
        let b = simulate_region("r0", 3, &ps, &RegionParams::default()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.truth, b.truth);
        for w in Slot::CHAIN.windows(2) {
            oracle_homography(&a.views[&w[0]], &a.views[&w[1]], &ps).unwrap();
        }
        assert!(!a.truth[&Slot::Hcm1000].is_empty());
    }

    #[test]
    fn truth_without_pixels_matches_rendered_truth() {
        let ps = ProfileSet::defaults();
        let a = simulate_region("r0", 8, &ps, &RegionParams::default()).unwrap();
        assert_eq!(region_truth(8, &ps, &RegionParams::default()).unwrap(), a.truth);
        let (_, views) = region_layout(8, &ps, &RegionParams::default()).unwrap();
        assert_eq!(views, a.views);
    }
}
