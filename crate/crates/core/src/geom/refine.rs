//! Gauss-Newton polish of a homography on its inliers.
//!
//! Optimizes the eight entries with `h33` fixed to 1, minimizing the summed
//! squared forward reprojection error. Work happens in Hartley-normalized
//! coordinates; the destination normalization is an isotropic scaling, so the
//! minimizer is the same as in pixel units.

use nalgebra::{Matrix3, SMatrix, SVector};

use super::dlt::normalizing_transform;
use super::{Correspondence, GeomError, Homography};

const MAX_ITERS: usize = 20;
const REL_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub homography: Homography,
    pub initial_cost: f64,
    /// Summed squared forward error in destination pixels.
    pub final_cost: f64,
    pub iterations: usize,
    /// Normal equations were singular; `homography` is the input unchanged.
    pub singular: bool,
}

fn cost_px(h: &Homography, pairs: &[Correspondence]) -> f64 {
    pairs
        .iter()
        .map(|c| match h.map_point(c.src) {
            Ok(p) => {
                let d = p - c.dst;
                d.x * d.x + d.y * d.y
            }
            Err(_) => f64::INFINITY,
        })
        .sum()
}

type Params = SVector<f64, 8>;

fn to_matrix(p: &Params) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

fn cost_norm(p: &Params, pts: &[(f64, f64, f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(x, y, u, v) in pts {
        let w = p[6] * x + p[7] * y + 1.0;
        if w.abs() < 1e-12 {
            return f64::INFINITY;
        }
        let ru = (p[0] * x + p[1] * y + p[2]) / w - u;
        let rv = (p[3] * x + p[4] * y + p[5]) / w - v;
        total += ru * ru + rv * rv;
    }
    total
}

pub fn refine_homography(
    h0: &Homography,
    inliers: &[Correspondence],
) -> Result<Refinement, GeomError> {
    if inliers.len() < 5 {
        return Err(GeomError::TooFewPoints {
            needed: 5,
            got: inliers.len(),
        });
    }
    if h0.rows()[2][2].abs() <= 1e-12 {
        return Err(GeomError::InvalidParameter("h33 must be non-zero".into()));
    }
    let initial_cost = cost_px(h0, inliers);
    let unchanged = |singular| Refinement {
        homography: *h0,
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        singular,
    };

    let (Some(ts), Some(td)) = (
        normalizing_transform(inliers.iter().map(|c| c.src)),
        normalizing_transform(inliers.iter().map(|c| c.dst)),
    ) else {
        return Ok(unchanged(true));
    };
    let Some(ts_inv) = ts.try_inverse() else {
        return Ok(unchanged(true));
    };
    let g = td * h0.matrix() * ts_inv;
    if g[(2, 2)].abs() <= 1e-12 {
        return Ok(unchanged(true));
    }
    let g = g / g[(2, 2)];
    let mut p = Params::from_column_slice(&[
        g[(0, 0)], g[(0, 1)], g[(0, 2)], g[(1, 0)], g[(1, 1)], g[(1, 2)], g[(2, 0)], g[(2, 1)],
    ]);
    let pts: Vec<(f64, f64, f64, f64)> = inliers
        .iter()
        .map(|c| {
            let (x, y) = (ts[(0, 0)] * c.src.x + ts[(0, 2)], ts[(1, 1)] * c.src.y + ts[(1, 2)]);
            let (u, v) = (td[(0, 0)] * c.dst.x + td[(0, 2)], td[(1, 1)] * c.dst.y + td[(1, 2)]);
            (x, y, u, v)
        })
        .collect();

    let mut cost = cost_norm(&p, &pts);
    let mut iterations = 0;
    let mut singular = false;
    while iterations < MAX_ITERS && cost > 0.0 {
        iterations += 1;
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = Params::zeros();
        for &(x, y, u, v) in &pts {
            let w = p[6] * x + p[7] * y + 1.0;
            let a = p[0] * x + p[1] * y + p[2];
            let b = p[3] * x + p[4] * y + p[5];
            let (pu, pv) = (a / w, b / w);
            let ju = Params::from_column_slice(&[
                x / w, y / w, 1.0 / w, 0.0, 0.0, 0.0, -pu * x / w, -pu * y / w,
            ]);
            let jv = Params::from_column_slice(&[
                0.0, 0.0, 0.0, x / w, y / w, 1.0 / w, -pv * x / w, -pv * y / w,
            ]);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * (pu - u) + jv * (pv - v);
        }
        let step = match jtj.cholesky() {
            Some(ch) => ch.solve(&(-jtr)),
            None => match jtj.lu().solve(&(-jtr)) {
                Some(s) => s,
                None => {
                    singular = true;
                    break;
                }
            },
        };
        if !step.iter().all(|v| v.is_finite()) {
            singular = true;
            break;
        }
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = p + step * lambda;
            let c = cost_norm(&trial, &pts);
            if c < cost {
                accepted = Some((trial, c));
                break;
            }
            lambda *= 0.5;
        }
        let Some((trial, c)) = accepted else {
            break;
        };
        let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
        p = trial;
        cost = c;
        if rel < REL_TOL {
            break;
        }
    }
    if singular && iterations <= 1 {
        return Ok(unchanged(true));
    }

    let Some(td_inv) = td.try_inverse() else {
        return Ok(unchanged(true));
    };
    let refined = match Homography::from_matrix(&(td_inv * to_matrix(&p) * ts)) {
        Ok(h) => h,
        Err(_) => return Ok(unchanged(singular)),
    };
    let final_cost = cost_px(&refined, inliers);
    if !(final_cost <= initial_cost) {
        return Ok(Refinement {
            iterations,
            ..unchanged(singular)
        });
    }
    Ok(Refinement {
        homography: refined,
        initial_cost,
        final_cost,
        iterations,
        singular,
    })
}
