use serde::{Deserialize, Serialize};

use super::{Descriptor, FeatureError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub src_index: usize,
    pub dst_index: usize,
    pub distance: u32,
}

/// Nearest and second-nearest distance from `d` into `set`; ties resolve to
/// the lowest index.
fn nearest_two(d: &Descriptor, set: &[Descriptor]) -> (usize, u32, Option<u32>) {
    let mut best = (usize::MAX, u32::MAX);
    let mut second = u32::MAX;
    for (j, e) in set.iter().enumerate() {
        let dist = d.hamming(e);
        if dist < best.1 {
            second = best.1;
            best = (j, dist);
        } else if dist < second {
            second = dist;
        }
    }
    (best.0, best.1, (second != u32::MAX).then_some(second))
}

/// Ratio-tested, cross-checked nearest-neighbour matching. `ratio >= 1`
/// disables the ratio test. Results are ordered by source index.
pub fn match_descriptors(
    src: &[Descriptor],
    dst: &[Descriptor],
    ratio: f64,
) -> Result<Vec<Match>, FeatureError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(FeatureError::InvalidRatio(ratio));
    }
    if src.is_empty() || dst.is_empty() {
        return Ok(Vec::new());
    }
    let reverse: Vec<usize> = dst.iter().map(|d| nearest_two(d, src).0).collect();
    let mut out = Vec::new();
    for (i, d) in src.iter().enumerate() {
        let (j, best, second) = nearest_two(d, dst);
        let passes = ratio >= 1.0
            || match second {
                None => true,
                Some(s) => (best as f64) < ratio * s as f64,
            };
        if passes && reverse[j] == i {
            out.push(Match {
                src_index: i,
                dst_index: j,
                distance: best,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Descriptor(rng.gen())).collect()
    }

    #[test]
    fn identical_sets_match_identity() {
        let s = random_set(40, 1);
        let m = match_descriptors(&s, &s, 0.8).unwrap();
        assert_eq!(m.len(), 40);
        for (i, x) in m.iter().enumerate() {
            assert_eq!((x.src_index, x.dst_index, x.distance), (i, i, 0));
        }
    }

    #[test]
    fn five_flipped_bits_still_match() {
        let src = random_set(64, 2);
        // Oracle: random 256-bit descriptors are ~128 apart, far beyond 5 flips.
        for a in 0..64 {
            for b in 0..a {
                assert!(src[a].hamming(&src[b]) > 60);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dst: Vec<Descriptor> = src
            .iter()
            .map(|d| {
                let mut d = *d;
                for bit in rand::seq::index::sample(&mut rng, 256, 5) {
                    d.flip(bit);
                }
                d
            })
            .collect();
        let m = match_descriptors(&src, &dst, 0.8).unwrap();
        let correct = m.iter().filter(|x| x.src_index == x.dst_index).count();
        assert!(correct as f64 >= 0.95 * 64.0);
        assert!(m.iter().all(|x| x.distance <= 256));
    }

    #[test]
    fn empty_and_bad_ratio() {
        let s = random_set(3, 4);
        assert!(match_descriptors(&[], &s, 0.8).unwrap().is_empty());
        assert!(match_descriptors(&s, &[], 0.8).unwrap().is_empty());
        assert!(match_descriptors(&s, &s, 0.0).is_err());
        assert!(match_descriptors(&s, &s, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn ratio_one_is_monotone_and_symmetric(seed in 0u64..500, n in 1usize..30, m in 1usize..30) {
            let a = random_set(n, seed);
            let mut b = random_set(m, seed + 9999);
            // Plant a few near-duplicates so matches exist.
            for k in 0..n.min(m) / 2 {
                b[k] = a[k];
                b[k].flip(k % 256);
            }
            let loose = match_descriptors(&a, &b, 1.0).unwrap();
            let strict = match_descriptors(&a, &b, 0.8).unwrap();
            prop_assert!(loose.len() >= strict.len());
            let mut back: Vec<(usize, usize)> = match_descriptors(&b, &a, 1.0)
                .unwrap()
                .iter()
                .map(|x| (x.dst_index, x.src_index))
                .collect();
            back.sort();
            let fwd: Vec<(usize, usize)> = loose.iter().map(|x| (x.src_index, x.dst_index)).collect();
            prop_assert_eq!(fwd, back);
        }
    }
}
