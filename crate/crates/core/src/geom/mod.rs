//! Planar projective geometry: homographies, their robust estimation, and the
//! point and box mappings used for annotation transfer.

mod dlt;
mod homography;
mod ransac;
mod refine;

pub use dlt::{estimate_dlt, normalizing_transform};
pub use homography::Homography;
pub use ransac::{ransac_homography, RansacParams, RansacReport};
pub use refine::{refine_homography, Refinement};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("singular homography")]
    Singular,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no model found with at least 4 inliers")]
    EstimationFailed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// A source/destination point pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
}

impl Correspondence {
    pub fn new(src: Point2, dst: Point2) -> Self {
        Self { src, dst }
    }
}

/// Axis-aligned box in continuous pixel coordinates, serialized as
/// `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x1, self.y1),
            Point2::new(self.x2, self.y1),
            Point2::new(self.x2, self.y2),
            Point2::new(self.x1, self.y2),
        ]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn intersection(&self, o: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x1.max(o.x1),
            self.y1.max(o.y1),
            self.x2.min(o.x2),
            self.y2.min(o.y2),
        );
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o).map_or(0.0, |b| b.area());
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Tight axis-aligned hull of a point set.
    pub fn hull(points: &[Point2]) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            b.x1 = b.x1.min(p.x);
            b.y1 = b.y1.min(p.y);
            b.x2 = b.x2.max(p.x);
            b.y2 = b.y2.max(p.y);
        }
        b
    }

    /// Full extent of a `width x height` image under the pixel-center convention.
    pub fn image_bounds(width: usize, height: usize) -> BBox {
        BBox::new(-0.5, -0.5, width as f64 - 0.5, height as f64 - 0.5)
    }
}

/// Maps the four corners of `b` and returns their axis-aligned hull. A box
/// that straddles the line at infinity has no finite image.
pub fn map_box(h: &Homography, b: &BBox) -> Result<BBox, GeomError> {
    let r = h.rows();
    let signs = b.corners().map(|c| (r[2][0] * c.x + r[2][1] * c.y + r[2][2]) > 0.0);
    if signs.iter().any(|&s| s != signs[0]) {
        return Err(GeomError::PointAtInfinity);
    }
    let mapped = b
        .corners()
        .iter()
        .map(|&c| h.map_point(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BBox::hull(&mapped))
}

/// Largest displacement between two homographies over a set of probe points.
pub fn max_point_discrepancy(
    a: &Homography,
    b: &Homography,
    probes: &[Point2],
) -> Result<f64, GeomError> {
    let mut worst = 0f64;
    for &p in probes {
        worst = worst.max(a.map_point(p)?.distance(b.map_point(p)?));
    }
    Ok(worst)
}
