//! Deterministic low-cost-optics degradation.
//!
//! The pipeline order is fixed: center crop by `fov_crop` and resize back,
//! Gaussian blur, per-channel gain/offset, radial vignette, additive Gaussian
//! noise. Noise comes from ChaCha8 seeded with the caller's seed, drawn in
//! row-major order with channels interleaved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{quantize, ImageError, Plane, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Blur sigma in output pixels.
    pub blur_sigma: f64,
    /// Multiplicative gain per channel (identity is 1).
    pub channel_gain: [f64; 3],
    /// Additive offset per channel as a fraction of the 0..255 range.
    pub channel_offset: [f64; 3],
    pub vignette_strength: f64,
    /// Noise standard deviation as a fraction of the 0..255 range.
    pub noise_sigma: f64,
    /// Linear fraction of the frame kept by the center crop.
    pub fov_crop: f64,
}

impl DegradationParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            channel_gain: [1.0; 3],
            channel_offset: [0.0; 3],
            vignette_strength: 0.0,
            noise_sigma: 0.0,
            fov_crop: 1.0,
        }
    }

    /// Default low-cost microscope appearance. These are calibration knobs
    /// tuned against the simulator, not measured optics.
    pub fn low_cost_default() -> Self {
        Self {
            blur_sigma: 1.2,
            channel_gain: [0.95, 0.92, 1.04],
            channel_offset: [0.02, 0.0, 0.03],
            vignette_strength: 0.25,
            noise_sigma: 0.006,
            fov_crop: 0.8,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let bad = |m: &str| Err(ImageError::InvalidParams(m.to_string()));
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return bad("blur_sigma must be >= 0");
        }
        if !(self.fov_crop > 0.0 && self.fov_crop <= 1.0) {
            return bad("fov_crop must be in (0, 1]");
        }
        if !(self.vignette_strength >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("vignette_strength and noise_sigma must be >= 0");
        }
        if self
            .channel_offset
            .iter()
            .any(|o| !(o.abs() <= 1.0))
            || self.channel_gain.iter().any(|g| !g.is_finite())
        {
            return bad("channel offsets must lie in [-1, 1] and gains must be finite");
        }
        Ok(())
    }
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn degrade(img: &Raster, params: &DegradationParams, seed: u64) -> Result<Raster, ImageError> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let n = img.channels().count();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut planes: Vec<Plane> = (0..n).map(|c| img.channel_plane(c)).collect();

    if params.fov_crop < 1.0 {
        let c = params.fov_crop;
        for p in planes.iter_mut() {
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                let sy = cy + (y as f64 - cy) * c;
                for x in 0..w {
                    out.push(p.sample_clamped(cx + (x as f64 - cx) * c, sy));
                }
            }
            *p = Plane::from_vec(w, h, out);
        }
    }

    if params.blur_sigma > 0.0 {
        for p in planes.iter_mut() {
            *p = p.blurred(params.blur_sigma);
        }
    }

    for (ch, p) in planes.iter_mut().enumerate() {
        let gain = params.channel_gain[ch] as f32;
        let offset = (params.channel_offset[ch] * 255.0) as f32;
        if gain != 1.0 || offset != 0.0 {
            for v in p.data_mut() {
                *v = (*v * gain + offset).clamp(0.0, 255.0);
            }
        }
    }

    if params.vignette_strength > 0.0 {
        let r_max_sq = cx * cx + cy * cy;
        for p in planes.iter_mut() {
            let data = p.data_mut();
            for y in 0..h {
                let dy = y as f64 - cy;
                for x in 0..w {
                    let dx = x as f64 - cx;
                    let m = 1.0 - params.vignette_strength * (dx * dx + dy * dy) / r_max_sq;
                    data[y * w + x] *= m.max(0.0) as f32;
                }
            }
        }
    }

    let mut out = vec![0u8; w * h * n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (params.noise_sigma * 255.0) as f32;
    for i in 0..w * h {
        for (ch, p) in planes.iter().enumerate() {
            let mut v = p.data()[i];
            if sigma > 0.0 {
                let z: f32 = StandardNormal.sample(&mut rng);
                v += sigma * z;
            }
            out[i * n + ch] = quantize(v);
        }
    }
    let raster = Raster::new(w, h, img.channels(), out)?;
    Ok(match img.meta() {
        Some(m) => raster.with_meta(m.clone()),
        None => raster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{laplacian_variance, Channels};

    fn textured() -> Raster {
        // Deterministic pseudo-random texture.
        let mut state = 12345u32;
        let data = (0..64 * 48 * 3)
            .map(|_| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                (state >> 24) as u8
            })
            .collect();
        Raster::new(64, 48, Channels::Rgb, data).unwrap()
    }

    #[test]
    fn identity_params_are_identity() {
        let img = textured();
        assert_eq!(degrade(&img, &DegradationParams::identity(), 9).unwrap(), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = textured();
        let p = DegradationParams::low_cost_default();
        assert_eq!(degrade(&img, &p, 4).unwrap(), degrade(&img, &p, 4).unwrap());
        assert_ne!(degrade(&img, &p, 4).unwrap(), degrade(&img, &p, 5).unwrap());
    }

    #[test]
    fn blur_reduces_sharpness() {
        let img = textured();
        let p = DegradationParams {
            blur_sigma: 2.0,
            ..DegradationParams::identity()
        };
        let out = degrade(&img, &p, 0).unwrap();
        assert!(laplacian_variance(&out) < laplacian_variance(&img));
    }

    #[test]
    fn rejects_bad_crop() {
        let p = DegradationParams {
            fov_crop: 0.0,
            ..DegradationParams::identity()
        };
        assert!(degrade(&textured(), &p, 0).is_err());
    }

    #[test]
    fn crop_zooms_about_center() {
        // A bright dot right of center moves outward by 1/crop.
        let mut data = vec![0u8; 101 * 101];
        data[50 * 101 + 70] = 255;
        let img = Raster::new(101, 101, Channels::Gray, data).unwrap();
        let p = DegradationParams {
            fov_crop: 0.8,
            ..DegradationParams::identity()
        };
        let out = degrade(&img, &p, 0).unwrap();
        let (mut best, mut at) = (0, 0);
        for x in 0..101 {
            if out.get(x, 50, 0) > best {
                best = out.get(x, 50, 0);
                at = x;
            }
        }
        assert_eq!(at, 75);
    }
}
