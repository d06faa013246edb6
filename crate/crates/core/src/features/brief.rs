use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureError, Keypoint, BORDER};
use crate::imagecore::Raster;

pub const DEFAULT_PATTERN_SEED: u64 = 7;

const PATCH: i32 = 31;
const HALF: i32 = PATCH / 2;
const SMOOTH_SIGMA: f64 = 2.0;

/// 256-bit binary descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }
}

/// The 256 comparison point pairs, drawn once from an isotropic Gaussian with
/// sigma = patch / 5 and clamped to the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct BriefPattern {
    pairs: Vec<[(i32, i32); 2]>,
}

impl BriefPattern {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PATCH as f64 / 5.0).expect("positive sigma");
        let draw = |rng: &mut ChaCha8Rng| -> (i32, i32) {
            let mut c = || {
                let v: f64 = normal.sample(rng);
                v.round().clamp(-HALF as f64, HALF as f64) as i32
            };
            let x = c();
            (x, c())
        };
        let mut pairs = Vec::with_capacity(256);
        while pairs.len() < 256 {
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            if p != q {
                pairs.push([p, q]);
            }
        }
        Self { pairs }
    }

    pub fn pairs(&self) -> &[[(i32, i32); 2]] {
        &self.pairs
    }
}

impl Default for BriefPattern {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERN_SEED)
    }
}

/// Integer Gaussian smoothing (sigma 2, clamp-to-border). Integer weights keep
/// comparisons exactly invariant to additive brightness shifts.
fn smooth(img: &Raster) -> Vec<u32> {
    let r = (3.0 * SMOOTH_SIGMA).ceil() as i64;
    let kernel: Vec<u32> = (-r..=r)
        .map(|i| (256.0 * (-(i * i) as f64 / (2.0 * SMOOTH_SIGMA * SMOOTH_SIGMA)).exp()).round() as u32)
        .collect();
    let (w, h) = (img.width(), img.height());
    let data = img.data();
    let mut tmp = vec![0u32; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0u32;
            for (k, &kv) in kernel.iter().enumerate() {
                let xi = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xi] as u32;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0u32; w * h];
    for y in 0..h {
        for (k, &kv) in kernel.iter().enumerate() {
            let yi = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src = &tmp[yi * w..(yi + 1) * w];
            for (d, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

pub fn describe(
    img: &Raster,
    kps: &[Keypoint],
    pattern_seed: u64,
) -> Result<Vec<Descriptor>, FeatureError> {
    describe_with(img, kps, &BriefPattern::new(pattern_seed))
}

pub fn describe_with(
    img: &Raster,
    kps: &[Keypoint],
    pattern: &BriefPattern,
) -> Result<Vec<Descriptor>, FeatureError> {
    if !img.is_gray() {
        return Err(FeatureError::NotGrayscale);
    }
    let (w, h) = (img.width() as i32, img.height() as i32);
    let mut centers = Vec::with_capacity(kps.len());
    for k in kps {
        let (x, y) = (k.position.x.round() as i32, k.position.y.round() as i32);
        let b = BORDER as i32;
        if x < b || y < b || x >= w - b || y >= h - b {
            return Err(FeatureError::KeypointTooCloseToBorder {
                x: k.position.x,
                y: k.position.y,
            });
        }
        centers.push((x, y));
    }
    if centers.is_empty() {
        return Ok(Vec::new());
    }
    let smoothed = smooth(img);
    let at = |x: i32, y: i32| smoothed[(y * w + x) as usize];
    Ok(centers
        .iter()
        .map(|&(cx, cy)| {
            let mut d = [0u64; 4];
            for (i, [p, q]) in pattern.pairs.iter().enumerate() {
                if at(cx + p.0, cy + p.1) < at(cx + q.0, cy + q.1) {
                    d[i / 64] |= 1 << (i % 64);
                }
            }
            Descriptor(d)
        })
        .collect())
}
