use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{GeomError, Point2};

const NORMALIZE_EPS: f64 = 1e-12;
const DET_EPS: f64 = 1e-12;
const INFINITY_EPS: f64 = 1e-12;

/// 3x3 projective map. Stored scaled so `h[2][2] = 1` whenever that entry is
/// not vanishing; otherwise scaled to unit Frobenius norm.
///
/// Serialized as a row-major array of 9 numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = GeomError;
    fn try_from(v: [f64; 9]) -> Result<Self, GeomError> {
        Homography::from_row_major(v)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes and validates a raw matrix.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, GeomError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeomError::Singular);
        }
        let scale = if m[2][2].abs() > NORMALIZE_EPS {
            m[2][2]
        } else {
            m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
        };
        if scale == 0.0 {
            return Err(GeomError::Singular);
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v /= scale;
            }
        }
        let h = Self { m: n };
        if h.determinant().abs() <= DET_EPS {
            return Err(GeomError::Singular);
        }
        Ok(h)
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self, GeomError> {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub(crate) fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeomError> {
        Self::new([
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ])
    }

    pub(crate) fn matrix(&self) -> Matrix3<f64> {
        let m = &self.m;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    /// Scale, rotation (radians, counter-clockwise in image axes) and translation.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            m: [
                [scale * c + 0.0, -scale * s + 0.0, tx],
                [scale * s + 0.0, scale * c + 0.0, ty],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::similarity(1.0, 0.0, tx, ty)
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Self, GeomError> {
        let inv = self.matrix().try_inverse().ok_or(GeomError::Singular)?;
        Self::from_matrix(&inv)
    }

    /// `self` applied after `first`: the map `p -> self(first(p))`.
    pub fn after(&self, first: &Homography) -> Result<Self, GeomError> {
        Self::from_matrix(&(self.matrix() * first.matrix()))
    }

    pub fn map_point(&self, p: Point2) -> Result<Point2, GeomError> {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() <= INFINITY_EPS {
            return Err(GeomError::PointAtInfinity);
        }
        Ok(Point2::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }

    /// Largest absolute entry-wise difference to another homography.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
