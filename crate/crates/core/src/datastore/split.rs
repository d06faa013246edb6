//! Region-granular train/test/val splits with class stratification.
//!
//! Every image of a region shares the region's split. Sizes follow the
//! target fractions exactly (largest remainder); a seeded shuffle fills the
//! splits, then pairwise swaps reduce the per-class fraction deviations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::annotation::CellClass;

/// Train, test and validation fractions.
pub const PAPER_FRACTIONS: [f64; 3] = [0.665, 0.30, 0.035];
pub const DEFAULT_CLASS_TOLERANCE: f64 = 0.05;
const MIN_REGIONS: usize = 10;
/// Classes with fewer instances are not stratified.
const MIN_CLASS_INSTANCES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignment: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region_id: String,
    pub class_counts: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub sizes: [usize; 3],
    /// Share of each class's instances per split, for classes present.
    pub class_fractions: BTreeMap<CellClass, [f64; 3]>,
    /// Largest deviation from the target fraction over stratified classes.
    pub max_deviation: f64,
    pub within_tolerance: bool,
    pub swaps: usize,
    pub warnings: Vec<String>,
}

/// Split sizes by largest remainder; ties go to the earlier split.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

struct Balance<'a> {
    counts: [[f64; 4]; 3],
    totals: [f64; 4],
    active: [bool; 4],
    fractions: [f64; 3],
    regions: &'a [RegionSummary],
}

impl Balance<'_> {
    fn deviation(&self, s: usize, c: usize, count: f64) -> f64 {
        count / self.totals[c] - self.fractions[s]
    }

    fn objective(&self) -> f64 {
        (0..3)
            .flat_map(|s| (0..4).map(move |c| (s, c)))
            .filter(|&(_, c)| self.active[c])
            .map(|(s, c)| self.deviation(s, c, self.counts[s][c]).powi(2))
            .sum()
    }

    fn max_deviation(&self) -> f64 {
        (0..3)
            .flat_map(|s| (0..4).map(move |c| (s, c)))
            .filter(|&(_, c)| self.active[c])
            .map(|(s, c)| self.deviation(s, c, self.counts[s][c]).abs())
            .fold(0.0, f64::max)
    }

    /// Objective change from exchanging regions `a` (in `sa`) and `b` (in `sb`).
    fn swap_delta(&self, a: usize, sa: usize, b: usize, sb: usize) -> f64 {
        let (xa, xb) = (&self.regions[a].class_counts, &self.regions[b].class_counts);
        let mut d = 0.0;
        for c in (0..4).filter(|&c| self.active[c]) {
            let diff = xb[c] as f64 - xa[c] as f64;
            if diff == 0.0 {
                continue;
            }
            let (ca, cb) = (self.counts[sa][c], self.counts[sb][c]);
            d += self.deviation(sa, c, ca + diff).powi(2) - self.deviation(sa, c, ca).powi(2);
            d += self.deviation(sb, c, cb - diff).powi(2) - self.deviation(sb, c, cb).powi(2);
        }
        d
    }
}

pub fn generate_splits(
    regions: &[RegionSummary],
    fractions: [f64; 3],
    seed: u64,
    class_tolerance: f64,
) -> Result<(SplitManifest, SplitReport), StoreError> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(StoreError::InvalidSplit(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    if !(class_tolerance.is_finite() && class_tolerance >= 0.0) {
        return Err(StoreError::InvalidSplit(format!("class tolerance {class_tolerance}")));
    }
    if regions.len() < MIN_REGIONS {
        return Err(StoreError::InvalidSplit(format!("{} regions; at least {MIN_REGIONS} needed", regions.len())));
    }
    let mut sorted: Vec<RegionSummary> = regions.to_vec();
    sorted.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].region_id == w[1].region_id) {
        return Err(StoreError::DuplicateRegion(w[0].region_id.clone()));
    }
    let n = sorted.len();
    let sizes = split_sizes(n, fractions);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split_of = vec![0usize; n];
    let mut cursor = 0;
    for (s, &size) in sizes.iter().enumerate() {
        for &i in &order[cursor..cursor + size] {
            split_of[i] = s;
        }
        cursor += size;
    }

    let mut totals = [0f64; 4];
    let mut counts = [[0f64; 4]; 3];
    for (i, r) in sorted.iter().enumerate() {
        for c in 0..4 {
            totals[c] += r.class_counts[c] as f64;
            counts[split_of[i]][c] += r.class_counts[c] as f64;
        }
    }
    let mut warnings = Vec::new();
    let mut active = [false; 4];
    for c in CellClass::ALL {
        let t = totals[c.index()] as usize;
        active[c.index()] = t >= MIN_CLASS_INSTANCES;
        if t > 0 && t < MIN_CLASS_INSTANCES {
            let msg = format!("class {} has {t} instances; assigned by proportion only", c.name());
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut bal = Balance { counts, totals, active, fractions, regions: &sorted };

    // Best-improvement swaps; scanning in region-id order with a strict
    // comparison breaks ties lexicographically.
    let mut swaps = 0;
    while bal.max_deviation() > class_tolerance && swaps < 4 * n {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            for b in a + 1..n {
                let (sa, sb) = (split_of[a], split_of[b]);
                if sa == sb || sorted[a].class_counts == sorted[b].class_counts {
                    continue;
                }
                let d = bal.swap_delta(a, sa, b, sb);
                if d < -1e-15 && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (sa, sb) = (split_of[a], split_of[b]);
        for c in 0..4 {
            let diff = sorted[b].class_counts[c] as f64 - sorted[a].class_counts[c] as f64;
            bal.counts[sa][c] += diff;
            bal.counts[sb][c] -= diff;
        }
        split_of.swap(a, b);
        swaps += 1;
    }
    debug_assert!(bal.objective().is_finite());

    let max_deviation = bal.max_deviation();
    let within_tolerance = max_deviation <= class_tolerance;
    if !within_tolerance {
        let msg = format!("class stratification deviates by {max_deviation:.4}, above tolerance {class_tolerance}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let class_fractions = CellClass::ALL
        .into_iter()
        .filter(|c| totals[c.index()] > 0.0)
        .map(|c| (c, [0, 1, 2].map(|s| bal.counts[s][c.index()] / totals[c.index()])))
        .collect();
    let assignment = sorted.iter().zip(&split_of).map(|(r, &s)| (r.region_id.clone(), Split::ALL[s])).collect();
    Ok((
        SplitManifest { assignment, fractions, seed },
        SplitReport { sizes, class_fractions, max_deviation, within_tolerance, swaps, warnings },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn regions(n: usize, seed: u64) -> Vec<RegionSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| RegionSummary {
                region_id: format!("region-{i:04}"),
                class_counts: [0; 4].map(|_| rng.gen_range(0..4)),
            })
            .collect()
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(split_sizes(1000, PAPER_FRACTIONS), [665, 300, 35]);
        assert_eq!(split_sizes(200, PAPER_FRACTIONS), [133, 60, 7]);
        assert_eq!(split_sizes(10, [1.0 / 3.0; 3]), [4, 3, 3]);
        assert_eq!(split_sizes(17, [1.0, 0.0, 0.0]), [17, 0, 0]);
    }

    #[test]
    fn thousand_uniform_regions() {
        let rs = regions(1000, 3);
        let (m, rep) = generate_splits(&rs, PAPER_FRACTIONS, 9, DEFAULT_CLASS_TOLERANCE).unwrap();
        let count = |s: Split| m.assignment.values().filter(|&&x| x == s).count();
        assert_eq!([count(Split::Train), count(Split::Test), count(Split::Val)], [665, 300, 35]);
        assert!(rep.within_tolerance, "{rep:?}");
        assert!(rep.warnings.is_empty());
    }

    #[test]
    fn all_train() {
        let rs = regions(20, 1);
        let (m, rep) = generate_splits(&rs, [1.0, 0.0, 0.0], 0, DEFAULT_CLASS_TOLERANCE).unwrap();
        assert!(m.assignment.values().all(|&s| s == Split::Train));
        assert_eq!(rep.swaps, 0);
    }

    #[test]
    fn deterministic_and_order_independent() {
        let rs = regions(150, 4);
        let a = generate_splits(&rs, PAPER_FRACTIONS, 77, DEFAULT_CLASS_TOLERANCE).unwrap();
        let mut rev = rs.clone();
        rev.reverse();
        let b = generate_splits(&rev, PAPER_FRACTIONS, 77, DEFAULT_CLASS_TOLERANCE).unwrap();
        assert_eq!(a, b);
        let c = generate_splits(&rs, PAPER_FRACTIONS, 78, DEFAULT_CLASS_TOLERANCE).unwrap();
        assert_ne!(a.0.assignment, c.0.assignment);
    }

    #[test]
    fn rare_class_warns() {
        let mut rs = regions(30, 5);
        for r in &mut rs {
            r.class_counts[3] = 0;
        }
        rs[4].class_counts[3] = 2;
        let (_, rep) = generate_splits(&rs, PAPER_FRACTIONS, 1, DEFAULT_CLASS_TOLERANCE).unwrap();
        assert!(rep.warnings.iter().any(|w| w.contains("gametocyte")), "{:?}", rep.warnings);
    }

    #[test]
    fn rejects_bad_requests() {
        let rs = regions(30, 5);
        assert!(generate_splits(&rs, [0.5, 0.5, 0.1], 0, 0.05).is_err());
        assert!(generate_splits(&rs[..9], PAPER_FRACTIONS, 0, 0.05).is_err());
        let mut dup = rs.clone();
        dup[1].region_id = dup[0].region_id.clone();
        assert!(matches!(generate_splits(&dup, PAPER_FRACTIONS, 0, 0.05), Err(StoreError::DuplicateRegion(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sizes_within_one_region(n in 10usize..300, seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = (a.min(b), a.max(b));
            let fr = [a, b - a, 1.0 - b];
            let rs = regions(n, seed);
            let (m, rep) = generate_splits(&rs, fr, seed, DEFAULT_CLASS_TOLERANCE).unwrap();
            prop_assert_eq!(m.assignment.len(), n);
            for (s, split) in Split::ALL.iter().enumerate() {
                let k = m.assignment.values().filter(|x| *x == split).count();
                prop_assert!((k as f64 - fr[s] * n as f64).abs() <= 1.0);
                prop_assert_eq!(k, rep.sizes[s]);
            }
        }
    }
}
