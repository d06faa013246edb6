use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dlt::{estimate_dlt, minimal_sample_degenerate};
use super::refine::refine_homography;
use super::{Correspondence, GeomError, Homography};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier threshold in pixels, applied separately to the forward and the
    /// inverse reprojection error.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            confidence: 0.99,
            max_iters: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacReport {
    pub homography: Homography,
    pub inlier_indices: Vec<usize>,
    pub iterations_run: usize,
    pub inlier_ratio: f64,
    /// Mean forward reprojection error of the inliers, destination pixels.
    pub mean_inlier_error: f64,
    /// Set when the final Gauss-Newton polish hit singular normal equations.
    pub refine_singular: bool,
}

struct Consensus {
    inliers: Vec<usize>,
    mean_error: f64,
}

fn consensus(h: &Homography, inv: &Homography, pairs: &[Correspondence], threshold: f64) -> Consensus {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, c) in pairs.iter().enumerate() {
        let (Ok(fwd), Ok(back)) = (h.map_point(c.src), inv.map_point(c.dst)) else {
            continue;
        };
        let ef = fwd.distance(c.dst);
        let eb = back.distance(c.src);
        if ef < threshold && eb < threshold {
            inliers.push(i);
            total += 0.5 * (ef + eb);
        }
    }
    let mean_error = if inliers.is_empty() {
        f64::INFINITY
    } else {
        total / inliers.len() as f64
    };
    Consensus { inliers, mean_error }
}

fn adaptive_bound(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    if p_good <= 0.0 {
        return max_iters;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, max_iters)
    } else {
        max_iters
    }
}

/// Robust homography fit with 4-point minimal samples, symmetric transfer
/// error, an adaptive iteration bound, and a final least-squares + Gauss-Newton
/// polish on the best consensus set. Deterministic for a given seed.
pub fn ransac_homography(
    pairs: &[Correspondence],
    params: &RansacParams,
) -> Result<RansacReport, GeomError> {
    if pairs.len() < 4 {
        return Err(GeomError::TooFewPoints {
            needed: 4,
            got: pairs.len(),
        });
    }
    if !(params.threshold > 0.0) {
        return Err(GeomError::InvalidParameter("threshold must be > 0".into()));
    }
    if !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(GeomError::InvalidParameter("confidence must be in (0, 1)".into()));
    }
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Consensus)> = None;
    let mut bound = params.max_iters;
    let mut iterations = 0;
    while iterations < bound {
        iterations += 1;
        let idx = index::sample(&mut rng, n, 4);
        let sample: Vec<Correspondence> = idx.iter().map(|i| pairs[i]).collect();
        let src = [sample[0].src, sample[1].src, sample[2].src, sample[3].src];
        let dst = [sample[0].dst, sample[1].dst, sample[2].dst, sample[3].dst];
        if minimal_sample_degenerate(src) || minimal_sample_degenerate(dst) {
            continue;
        }
        let Ok(h) = estimate_dlt(&sample) else {
            continue;
        };
        let Ok(inv) = h.inverse() else {
            continue;
        };
        let c = consensus(&h, &inv, pairs, params.threshold);
        let better = match &best {
            None => true,
            Some((_, b)) => {
                c.inliers.len() > b.inliers.len()
                    || (c.inliers.len() == b.inliers.len() && c.mean_error < b.mean_error)
            }
        };
        if better && c.inliers.len() >= 4 {
            let ratio = c.inliers.len() as f64 / n as f64;
            bound = adaptive_bound(ratio, params.confidence, params.max_iters);
            best = Some((h, c));
        }
    }
    let (sample_h, best_c) = best.ok_or(GeomError::EstimationFailed)?;

    let inlier_pairs: Vec<Correspondence> = best_c.inliers.iter().map(|&i| pairs[i]).collect();
    let mut model = estimate_dlt(&inlier_pairs).unwrap_or(sample_h);
    let mut refine_singular = false;
    if inlier_pairs.len() >= 5 {
        if let Ok(r) = refine_homography(&model, &inlier_pairs) {
            refine_singular = r.singular;
            model = r.homography;
        }
    }
    let mut final_c = match model.inverse() {
        Ok(inv) => consensus(&model, &inv, pairs, params.threshold),
        Err(_) => Consensus {
            inliers: Vec::new(),
            mean_error: f64::INFINITY,
        },
    };
    if final_c.inliers.len() < 4 {
        // The polished model lost support; fall back to the consensus sample.
        model = sample_h;
        final_c = best_c;
    }
    let mean_forward = final_c
        .inliers
        .iter()
        .filter_map(|&i| model.map_point(pairs[i].src).ok().map(|p| p.distance(pairs[i].dst)))
        .sum::<f64>()
        / final_c.inliers.len() as f64;
    Ok(RansacReport {
        homography: model,
        inlier_ratio: final_c.inliers.len() as f64 / n as f64,
        inlier_indices: final_c.inliers,
        iterations_run: iterations,
        mean_inlier_error: mean_forward,
        refine_singular,
    })
}
