//! Central finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_losses, ranking_loss, triplet_argument, triplet_loss, BatchItem, FeatureVolume, LossConfig, LossError,
    ScoreMap,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Points whose hinge argument is this close to zero are resampled.
pub const HINGE_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub kernel: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = v[i];
            v[i] = x0 + STEP;
            let up = f(&v);
            v[i] = x0 - STEP;
            let down = f(&v);
            v[i] = x0;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn row(kernel: &str, errors: &[f64]) -> GradCheckRow {
    let max = errors.iter().copied().fold(0.0, f64::max);
    GradCheckRow { kernel: kernel.into(), points: errors.len(), max_rel_error: max, passed: max < TOLERANCE }
}

fn check_ranking(rng: &mut ChaCha8Rng, points: usize) -> Result<[GradCheckRow; 2], LossError> {
    let (mut ef, mut el) = (Vec::new(), Vec::new());
    while ef.len() < points {
        let [h, w, k] = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
        let n = h * w * k;
        let sf = uniform(rng, n, -1.0, 1.0);
        let sl = uniform(rng, n, -1.0, 1.0);
        let beta = rng.gen_range(-0.5..0.5);
        let a = ScoreMap::new(h, w, k, sf.clone())?;
        let b = ScoreMap::new(h, w, k, sl.clone())?;
        if (a.mean() - b.mean() - beta).abs() <= HINGE_MARGIN {
            continue;
        }
        let r = ranking_loss(&a, &b, beta)?;
        let loss = |f: &[f64], l: &[f64]| {
            let f = ScoreMap::new(h, w, k, f.to_vec()).expect("shape");
            let l = ScoreMap::new(h, w, k, l.to_vec()).expect("shape");
            ranking_loss(&f, &l, beta).expect("shape").loss
        };
        ef.push(relative_error(r.grad_sf.values(), &numeric_gradient(&sf, |x| loss(x, &sl))));
        el.push(relative_error(r.grad_sl.values(), &numeric_gradient(&sl, |x| loss(&sf, x))));
    }
    Ok([row("ranking/S_f", &ef), row("ranking/S_l", &el)])
}

fn check_triplet(rng: &mut ChaCha8Rng, points: usize) -> Result<[GradCheckRow; 3], LossError> {
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    while errs[0].len() < points {
        let c = rng.gen_range(1..9);
        let a = uniform(rng, c, -1.0, 1.0);
        let p = uniform(rng, c, -1.0, 1.0);
        let n = uniform(rng, c, -1.0, 1.0);
        let alpha = rng.gen_range(0.0..2.0);
        if triplet_argument(&a, &p, &n, alpha).abs() <= HINGE_MARGIN {
            continue;
        }
        let t = triplet_loss(&a, &p, &n, alpha)?;
        let l = |a: &[f64], p: &[f64], n: &[f64]| triplet_loss(a, p, n, alpha).expect("lengths").loss;
        errs[0].push(relative_error(&t.grad_anchor, &numeric_gradient(&a, |x| l(x, &p, &n))));
        errs[1].push(relative_error(&t.grad_positive, &numeric_gradient(&p, |x| l(&a, x, &n))));
        errs[2].push(relative_error(&t.grad_negative, &numeric_gradient(&n, |x| l(&a, &p, x))));
    }
    Ok([row("triplet/anchor", &errs[0]), row("triplet/positive", &errs[1]), row("triplet/negative", &errs[2])])
}

const S_SHAPE: [usize; 3] = [2, 2, 2];

/// Flattens a batch into one parameter vector: per item `s_f, s_l, f_f, f_l`.
fn flatten(items: &[BatchItem]) -> Vec<f64> {
    items
        .iter()
        .flat_map(|it| {
            it.s_f.values().iter().chain(it.s_l.values()).chain(it.f_f.values()).chain(it.f_l.values()).copied()
        })
        .collect()
}

fn unflatten(x: &[f64], n: usize, fshape: [usize; 3]) -> Vec<BatchItem> {
    let s = S_SHAPE.iter().product::<usize>();
    let f = fshape.iter().product::<usize>();
    let [sh, sw, sk] = S_SHAPE;
    let [c, h, w] = fshape;
    x.chunks(2 * s + 2 * f)
        .take(n)
        .map(|ch| BatchItem {
            s_f: ScoreMap::new(sh, sw, sk, ch[..s].to_vec()).expect("shape"),
            s_l: ScoreMap::new(sh, sw, sk, ch[s..2 * s].to_vec()).expect("shape"),
            f_f: FeatureVolume::new(c, h, w, ch[2 * s..2 * s + f].to_vec()).expect("shape"),
            f_l: FeatureVolume::new(c, h, w, ch[2 * s + f..].to_vec()).expect("shape"),
        })
        .collect()
}

fn check_batch(rng: &mut ChaCha8Rng, points: usize) -> Result<GradCheckRow, LossError> {
    let mut errs = Vec::new();
    while errs.len() < points {
        let n = rng.gen_range(2..6);
        let fshape = [rng.gen_range(2..5), 2, 2];
        let per = 2 * S_SHAPE.iter().product::<usize>() + 2 * fshape.iter().product::<usize>();
        let x = uniform(rng, n * per, -1.0, 1.0);
        let items = unflatten(&x, n, fshape);
        let cfg = LossConfig { beta: rng.gen_range(-0.3..0.3), alpha: rng.gen_range(0.0..2.0) };
        let neg: Vec<usize> = (0..n).map(|i| (i + rng.gen_range(1..n)) % n).collect();
        let neg = if is_derangement(&neg) { neg } else { super::rotation(n) };
        let pooled: Vec<Vec<f64>> = items.iter().map(|it| super::global_average_pool(&it.f_l)).collect();
        let near_hinge = items.iter().enumerate().any(|(i, it)| {
            let r = it.s_f.mean() - it.s_l.mean() - cfg.beta;
            let t = triplet_argument(&super::global_average_pool(&it.f_f), &pooled[i], &pooled[neg[i]], cfg.alpha);
            r.abs() <= HINGE_MARGIN || t.abs() <= HINGE_MARGIN
        });
        if near_hinge {
            continue;
        }
        let report = batch_losses(&items, &neg, &cfg)?;
        let analytic: Vec<f64> = report
            .grads
            .iter()
            .flat_map(|g| g.s_f.values().iter().chain(g.s_l.values()).chain(g.f_f.values()).chain(g.f_l.values()).copied())
            .collect();
        debug_assert_eq!(analytic.len(), flatten(&items).len());
        let numeric = numeric_gradient(&x, |v| batch_losses(&unflatten(v, n, fshape), &neg, &cfg).expect("valid").total);
        errs.push(relative_error(&analytic, &numeric));
    }
    Ok(row("batch/all inputs", &errs))
}

fn is_derangement(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().enumerate().all(|(i, &j)| j != i && !std::mem::replace(&mut seen[j], true))
}

/// Runs every kernel at `points` random non-hinge points.
pub fn run_suite(seed: u64, points: usize) -> Result<Vec<GradCheckRow>, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    rows.extend(check_ranking(&mut rng, points)?);
    rows.extend(check_triplet(&mut rng, points)?);
    rows.push(check_batch(&mut rng, points)?);
    Ok(rows)
}
