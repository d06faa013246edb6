//! Procedural blood-smear world and orthographic view renderer.
//!
//! Every quantity the registration pipeline estimates has an exact answer
//! here: cell positions are analytic, the camera is axis-aligned, and the
//! homography between any two views is a closed-form similarity.

mod noise;
mod region;
mod render;

pub use region::{region_layout, region_truth, simulate_region, RegionParams, SimulatedRegion};
pub use render::{render_view, view_truth};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::CellClass;
use crate::geom::{BBox, GeomError, Homography};
use crate::imagecore::ImageError;
use crate::scopemodel::{Magnification, ProfileSet, ScopeError, StageCoord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("views do not overlap in slide space")]
    DisjointViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub center_mm: [f64; 2],
    /// Semi-axes before rotation.
    pub radii_mm: [f64; 2],
    pub orientation_rad: f64,
    pub texture_seed: u64,
    /// `None` for a healthy cell.
    pub label: Option<CellClass>,
}

impl Cell {
    /// Half-extent of the rotated ellipse along x and y.
    pub fn half_extent_mm(&self) -> [f64; 2] {
        let (s, c) = self.orientation_rad.sin_cos();
        let [a, b] = self.radii_mm;
        [
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        ]
    }
}

/// An immutable slide: cells sorted by center x, which is also paint order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideScene {
    pub extent_mm: [f64; 2],
    pub cells: Vec<Cell>,
    pub background_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub extent_mm: [f64; 2],
    pub cell_density_per_mm2: f64,
    pub infection_rate: f64,
    /// Relative weights over [`CellClass::ALL`].
    pub class_weights: [f64; 4],
    pub radius_range_mm: [f64; 2],
    pub max_eccentricity: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent_mm: [1.6, 1.3],
            cell_density_per_mm2: 8000.0,
            infection_rate: 0.1,
            class_weights: [0.45, 0.35, 0.08, 0.12],
            radius_range_mm: [0.0032, 0.0040],
            max_eccentricity: 0.08,
        }
    }
}

impl SceneParams {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.to_string()));
        if !(self.extent_mm[0] > 0.0 && self.extent_mm[1] > 0.0) {
            return bad("extent must be positive");
        }
        if !(self.cell_density_per_mm2 > 0.0) {
            return bad("cell density must be positive");
        }
        if !(0.0..=1.0).contains(&self.infection_rate) {
            return bad("infection rate must lie in [0, 1]");
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class weights must be non-negative with positive sum");
        }
        let [lo, hi] = self.radius_range_mm;
        if !(lo > 0.0 && hi >= lo) || !(0.0..0.5).contains(&self.max_eccentricity) {
            return bad("radius range or eccentricity out of bounds");
        }
        Ok(())
    }

    fn max_radius(&self) -> f64 {
        self.radius_range_mm[1] * (1.0 + self.max_eccentricity)
    }
}

/// Default scene with the given extent, density and infection rate.
pub fn generate_scene(
    seed: u64,
    extent_mm: [f64; 2],
    cell_density_per_mm2: f64,
    infection_rate: f64,
) -> Result<SlideScene, SimError> {
    generate_scene_with(
        seed,
        &SceneParams {
            extent_mm,
            cell_density_per_mm2,
            infection_rate,
            ..SceneParams::default()
        },
    )
}

/// Poisson cell count, dart-throwing placement with minimum center spacing
/// equal to the largest possible radius.
pub fn generate_scene_with(seed: u64, p: &SceneParams) -> Result<SlideScene, SimError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ex, ey] = p.extent_mm;
    let lambda = p.cell_density_per_mm2 * ex * ey;
    let count = Poisson::new(lambda)
        .map_err(|e| SimError::InvalidParams(e.to_string()))?
        .sample(&mut rng) as usize;
    let spacing = p.max_radius();
    let grid = SpacingGrid::new(p.extent_mm, spacing);
    let mut grid = grid;
    let weight_sum: f64 = p.class_weights.iter().sum();
    let mut cells = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..30 {
            let c = [rng.gen_range(0.0..ex), rng.gen_range(0.0..ey)];
            if grid.is_free(c) {
                placed = Some(c);
                break;
            }
        }
        // Attribute draws happen regardless of placement so the stream stays
        // aligned per cell.
        let r = rng.gen_range(p.radius_range_mm[0]..=p.radius_range_mm[1]);
        let e = rng.gen_range(0.0..=p.max_eccentricity);
        let orientation_rad = rng.gen_range(0.0..std::f64::consts::PI);
        let texture_seed = rng.gen::<u64>();
        let infected = rng.gen_bool(p.infection_rate);
        let pick = rng.gen_range(0.0..weight_sum);
        let Some(center_mm) = placed else { continue };
        grid.insert(center_mm);
        let label = infected.then(|| {
            let mut acc = 0.0;
            for (class, w) in CellClass::ALL.iter().zip(p.class_weights) {
                acc += w;
                if pick < acc {
                    return *class;
                }
            }
            CellClass::ALL[3]
        });
        cells.push(Cell {
            center_mm,
            radii_mm: [r * (1.0 + e), r / (1.0 + e)],
            orientation_rad,
            texture_seed,
            label,
        });
    }
    cells.sort_by(|a, b| a.center_mm[0].total_cmp(&b.center_mm[0]));
    Ok(SlideScene {
        extent_mm: p.extent_mm,
        cells,
        background_seed: rng.gen(),
    })
}

struct SpacingGrid {
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<[f64; 2]>>,
}

impl SpacingGrid {
    fn new(extent: [f64; 2], cell: f64) -> Self {
        let nx = (extent[0] / cell).ceil().max(1.0) as usize;
        let ny = (extent[1] / cell).ceil().max(1.0) as usize;
        Self { cell, nx, ny, buckets: vec![Vec::new(); nx * ny] }
    }

    fn index(&self, c: [f64; 2]) -> (usize, usize) {
        (
            ((c[0] / self.cell) as usize).min(self.nx - 1),
            ((c[1] / self.cell) as usize).min(self.ny - 1),
        )
    }

    fn is_free(&self, c: [f64; 2]) -> bool {
        let (ix, iy) = self.index(c);
        let d2 = self.cell * self.cell;
        for gy in iy.saturating_sub(1)..=(iy + 1).min(self.ny - 1) {
            for gx in ix.saturating_sub(1)..=(ix + 1).min(self.nx - 1) {
                for o in &self.buckets[gy * self.nx + gx] {
                    let (dx, dy) = (o[0] - c[0], o[1] - c[1]);
                    if dx * dx + dy * dy < d2 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, c: [f64; 2]) {
        let (ix, iy) = self.index(c);
        self.buckets[iy * self.nx + ix].push(c);
    }
}

pub const DEFAULT_VIEW_SIZE: [usize; 2] = [1024, 768];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub microscope: String,
    pub magnification: Magnification,
    pub stage: StageCoord,
    #[serde(default = "default_size")]
    pub out_size: [usize; 2],
}

fn default_size() -> [usize; 2] {
    DEFAULT_VIEW_SIZE
}

impl ViewSpec {
    pub fn new(microscope: &str, magnification: Magnification, stage: StageCoord) -> Self {
        Self {
            microscope: microscope.to_string(),
            magnification,
            stage,
            out_size: DEFAULT_VIEW_SIZE,
        }
    }

    /// The view whose image center lands on `slide_center_mm`, with the stage
    /// reading rounded to the stage quantum.
    pub fn centered_on(
        microscope: &str,
        magnification: Magnification,
        slide_center_mm: [f64; 2],
        profiles: &ProfileSet,
    ) -> Result<Self, SimError> {
        let p = profiles.get(microscope)?;
        let off = p.at(magnification)?.optical_offset_mm;
        let stage = StageCoord::new(
            slide_center_mm[0] + p.stage_origin_mm[0] - off[0],
            slide_center_mm[1] + p.stage_origin_mm[1] - off[1],
        );
        Ok(Self::new(microscope, magnification, stage))
    }
}

/// Pixel/slide mapping of one final (post-degradation) image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    pub center_mm: [f64; 2],
    pub px_per_mm: f64,
    pub width: usize,
    pub height: usize,
}

impl ViewGeometry {
    pub fn of(spec: &ViewSpec, profiles: &ProfileSet) -> Result<Self, SimError> {
        let p = profiles.get(&spec.microscope)?;
        let m = p.at(spec.magnification)?;
        Ok(Self {
            center_mm: [
                spec.stage.x_mm - p.stage_origin_mm[0] + m.optical_offset_mm[0],
                spec.stage.y_mm - p.stage_origin_mm[1] + m.optical_offset_mm[1],
            ],
            px_per_mm: m.px_per_mm,
            width: spec.out_size[0],
            height: spec.out_size[1],
        })
    }

    pub fn to_px(&self, mm: [f64; 2]) -> [f64; 2] {
        [
            (mm[0] - self.center_mm[0]) * self.px_per_mm + (self.width as f64 - 1.0) / 2.0,
            (mm[1] - self.center_mm[1]) * self.px_per_mm + (self.height as f64 - 1.0) / 2.0,
        ]
    }

    pub fn to_mm(&self, px: [f64; 2]) -> [f64; 2] {
        [
            (px[0] - (self.width as f64 - 1.0) / 2.0) / self.px_per_mm + self.center_mm[0],
            (px[1] - (self.height as f64 - 1.0) / 2.0) / self.px_per_mm + self.center_mm[1],
        ]
    }

    /// Slide-space footprint of the image.
    pub fn footprint_mm(&self) -> BBox {
        let a = self.to_mm([-0.5, -0.5]);
        let b = self.to_mm([self.width as f64 - 0.5, self.height as f64 - 0.5]);
        BBox::new(a[0], a[1], b[0], b[1])
    }

    /// Pixel box of a cell's analytic ellipse bound.
    pub fn cell_box(&self, cell: &Cell) -> BBox {
        let [hx, hy] = cell.half_extent_mm();
        let a = self.to_px([cell.center_mm[0] - hx, cell.center_mm[1] - hy]);
        let b = self.to_px([cell.center_mm[0] + hx, cell.center_mm[1] + hy]);
        BBox::new(a[0], a[1], b[0], b[1])
    }
}

/// Exact similarity taking pixels of view `a` to pixels of view `b`.
pub fn oracle_homography(a: &ViewSpec, b: &ViewSpec, profiles: &ProfileSet) -> Result<Homography, SimError> {
    let ga = ViewGeometry::of(a, profiles)?;
    let gb = ViewGeometry::of(b, profiles)?;
    if ga.footprint_mm().intersection(&gb.footprint_mm()).is_none() {
        return Err(SimError::DisjointViews);
    }
    Ok(oracle_between(&ga, &gb))
}

pub(crate) fn oracle_between(ga: &ViewGeometry, gb: &ViewGeometry) -> Homography {
    let s = gb.px_per_mm / ga.px_per_mm;
    let o = gb.to_px(ga.to_mm([0.0, 0.0]));
    Homography::similarity(s, 0.0, o[0], o[1])
}
