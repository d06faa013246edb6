//! Domain-adaptation loss kernels with analytic gradients.
//!
//! Ranking loss over objectness maps: `max(0, mean(S_f) - mean(S_l) - beta)`,
//! with the mean over every entry. Triplet loss over pooled features:
//! `max(0, |p - a|^2 - |a - n|^2 + alpha)`. The hinge subgradient is zero.
//!
//! Active-branch triplet gradients:
//! `dL/dp = 2(p - a)`, `dL/dn = 2(a - n)`, `dL/da = 2(n - p)`.

pub mod gradcheck;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("vector lengths differ: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("a batch needs at least two items, got {0}")]
    BatchTooSmall(usize),
    #[error("negatives are not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("negative index maps item {0} to itself")]
    FixedPoint(usize),
}

fn check_finite(v: &[f64], what: &'static str) -> Result<(), LossError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

/// Objectness scores laid out as `[h][w][k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    h: usize,
    w: usize,
    k: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(h: usize, w: usize, k: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if h == 0 || w == 0 || k == 0 || values.len() != h * w * k {
            return Err(LossError::InvalidShape(format!("{h}x{w}x{k} with {} values", values.len())));
        }
        check_finite(&values, "score map")?;
        Ok(Self { h, w, k, values })
    }

    pub fn filled(h: usize, w: usize, k: usize, v: f64) -> Result<Self, LossError> {
        Self::new(h, w, k, vec![v; h * w * k])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Feature activations laid out as `[c][h][w]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVolume {
    c: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self, LossError> {
        if c == 0 || h == 0 || w == 0 || values.len() != c * h * w {
            return Err(LossError::InvalidShape(format!("{c}x{h}x{w} with {} values", values.len())));
        }
        check_finite(&values, "feature volume")?;
        Ok(Self { c, h, w, values })
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f64) -> Result<Self, LossError> {
        Self::new(c, h, w, vec![v; c * h * w])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.0, alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_finite(&[self.beta, self.alpha], "loss config")
    }
}

/// Per-channel mean over the spatial grid.
pub fn global_average_pool(f: &FeatureVolume) -> Vec<f64> {
    let hw = f.h * f.w;
    f.values.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect()
}

/// Spreads a pooled-vector gradient back over the volume it came from.
pub fn global_average_pool_backward(grad: &[f64], shape: [usize; 3]) -> Result<FeatureVolume, LossError> {
    let [c, h, w] = shape;
    if grad.len() != c {
        return Err(LossError::ShapeMismatch(vec![grad.len()], vec![c]));
    }
    let hw = (h * w) as f64;
    let values = grad.iter().flat_map(|g| std::iter::repeat_n(g / hw, h * w)).collect();
    FeatureVolume::new(c, h, w, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingOutput {
    pub loss: f64,
    pub grad_sf: ScoreMap,
    pub grad_sl: ScoreMap,
}

pub fn ranking_loss(sf: &ScoreMap, sl: &ScoreMap, beta: f64) -> Result<RankingOutput, LossError> {
    if sf.shape() != sl.shape() {
        return Err(LossError::ShapeMismatch(sf.shape().to_vec(), sl.shape().to_vec()));
    }
    let arg = sf.mean() - sl.mean() - beta;
    let [h, w, k] = sf.shape();
    let g = if arg > 0.0 { 1.0 / (h * w * k) as f64 } else { 0.0 };
    Ok(RankingOutput {
        loss: arg.max(0.0),
        grad_sf: ScoreMap::filled(h, w, k, g)?,
        grad_sl: ScoreMap::filled(h, w, k, -g + 0.0)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Value inside the triplet hinge.
pub fn triplet_argument(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> f64 {
    sq_dist(p, a) - sq_dist(a, n) + alpha
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<TripletOutput, LossError> {
    if a.len() != p.len() || a.len() != n.len() || a.is_empty() {
        return Err(LossError::LengthMismatch(a.len(), p.len(), n.len()));
    }
    let arg = triplet_argument(a, p, n, alpha);
    let len = a.len();
    if arg <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; len],
            grad_positive: vec![0.0; len],
            grad_negative: vec![0.0; len],
        });
    }
    Ok(TripletOutput {
        loss: arg,
        grad_anchor: (0..len).map(|i| 2.0 * (n[i] - p[i])).collect(),
        grad_positive: (0..len).map(|i| 2.0 * (p[i] - a[i])).collect(),
        grad_negative: (0..len).map(|i| 2.0 * (a[i] - n[i])).collect(),
    })
}

/// One source/target correspondence: scores and features of the
/// full-supervision image (`f`) and the low-cost image (`l`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub s_f: ScoreMap,
    pub s_l: ScoreMap,
    pub f_f: FeatureVolume,
    pub f_l: FeatureVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemGrads {
    pub s_f: ScoreMap,
    pub s_l: ScoreMap,
    pub f_f: FeatureVolume,
    pub f_l: FeatureVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemLoss {
    pub ranking: f64,
    pub triplet: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchReport {
    pub items: Vec<ItemLoss>,
    pub mean_ranking: f64,
    pub mean_triplet: f64,
    /// `mean_ranking + mean_triplet`; the gradients are taken of this.
    pub total: f64,
    pub grads: Vec<ItemGrads>,
}

fn validate_negatives(n: usize, negatives: &[usize]) -> Result<(), LossError> {
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if negatives.len() != n {
        return Err(LossError::NotAPermutation(n));
    }
    let mut seen = vec![false; n];
    for (i, &j) in negatives.iter().enumerate() {
        if j >= n || seen[j] {
            return Err(LossError::NotAPermutation(n));
        }
        seen[j] = true;
        if j == i {
            return Err(LossError::FixedPoint(i));
        }
    }
    Ok(())
}

/// Item `i` uses anchor `gap(f_f[i])`, positive `gap(f_l[i])` and negative
/// `gap(f_l[negatives[i]])`.
pub fn batch_losses(items: &[BatchItem], negatives: &[usize], cfg: &LossConfig) -> Result<BatchReport, LossError> {
    cfg.validate()?;
    validate_negatives(items.len(), negatives)?;
    let fshape = items[0].f_f.shape();
    for it in items {
        if it.f_f.shape() != fshape || it.f_l.shape() != fshape {
            return Err(LossError::ShapeMismatch(fshape.to_vec(), it.f_l.shape().to_vec()));
        }
    }
    let n = items.len() as f64;
    let anchors: Vec<Vec<f64>> = items.iter().map(|it| global_average_pool(&it.f_f)).collect();
    let positives: Vec<Vec<f64>> = items.iter().map(|it| global_average_pool(&it.f_l)).collect();
    let c = fshape[0];
    let mut pooled_f = vec![vec![0.0; c]; items.len()];
    let mut pooled_l = vec![vec![0.0; c]; items.len()];
    let mut losses = Vec::with_capacity(items.len());
    let mut score_grads = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let r = ranking_loss(&it.s_f, &it.s_l, cfg.beta)?;
        let j = negatives[i];
        let t = triplet_loss(&anchors[i], &positives[i], &positives[j], cfg.alpha)?;
        for ch in 0..c {
            pooled_f[i][ch] += t.grad_anchor[ch] / n;
            pooled_l[i][ch] += t.grad_positive[ch] / n;
            pooled_l[j][ch] += t.grad_negative[ch] / n;
        }
        let scale = |mut m: ScoreMap| {
            m.values.iter_mut().for_each(|v| *v /= n);
            m
        };
        score_grads.push((scale(r.grad_sf), scale(r.grad_sl)));
        losses.push(ItemLoss { ranking: r.loss, triplet: t.loss });
    }
    let mut grads = Vec::with_capacity(items.len());
    for (i, (gsf, gsl)) in score_grads.into_iter().enumerate() {
        grads.push(ItemGrads {
            s_f: gsf,
            s_l: gsl,
            f_f: global_average_pool_backward(&pooled_f[i], fshape)?,
            f_l: global_average_pool_backward(&pooled_l[i], fshape)?,
        });
    }
    let mean_ranking = losses.iter().map(|l| l.ranking).sum::<f64>() / n;
    let mean_triplet = losses.iter().map(|l| l.triplet).sum::<f64>() / n;
    Ok(BatchReport { items: losses, mean_ranking, mean_triplet, total: mean_ranking + mean_triplet, grads })
}

/// The cyclic shift `i -> i + 1`, the simplest valid negative assignment.
pub fn rotation(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i + 1) % n.max(1)).collect()
}
