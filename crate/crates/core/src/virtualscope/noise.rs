//! Hash-based value noise. Stateless so any tile of the world can be
//! rendered independently.

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn hash2(seed: u64, ix: i64, iy: i64) -> u64 {
    splitmix(
        seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    )
}

/// Uniform in [0, 1).
pub(crate) fn unit01(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn signed(h: u64) -> f32 {
    ((h >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
}

pub(crate) fn lattice_value(seed: u64, ix: i64, iy: i64) -> f32 {
    signed(hash2(seed, ix, iy))
}

/// Smoothly interpolated lattice noise in [-1, 1]; `x`, `y` in lattice units.
pub(crate) fn value_noise(seed: u64, x: f64, y: f64) -> f32 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let tx = (x - fx) as f32;
    let ty = (y - fy) as f32;
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let v00 = signed(hash2(seed, ix, iy));
    let v10 = signed(hash2(seed, ix + 1, iy));
    let v01 = signed(hash2(seed, ix, iy + 1));
    let v11 = signed(hash2(seed, ix + 1, iy + 1));
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sy
}

/// Fade for detail whose wavelength is `wavelength_px`: invisible below 2 px,
/// full strength above 4 px.
pub(crate) fn lod_weight(wavelength_px: f64) -> f32 {
    ((wavelength_px - 2.0) / 2.0).clamp(0.0, 1.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_bounded_and_continuous() {
        let mut prev = value_noise(5, 0.0, 0.3);
        for i in 1..2000 {
            let x = i as f64 * 0.01;
            let v = value_noise(5, x, 0.3);
            assert!((-1.0..=1.0).contains(&v));
            assert!((v - prev).abs() < 0.05);
            prev = v;
        }
        assert_eq!(value_noise(1, 3.0, 4.0), value_noise(1, 3.0, 4.0));
        assert_ne!(value_noise(1, 3.5, 4.5), value_noise(2, 3.5, 4.5));
    }

    #[test]
    fn lod_fade() {
        assert_eq!(lod_weight(1.0), 0.0);
        assert_eq!(lod_weight(3.0), 0.5);
        assert_eq!(lod_weight(10.0), 1.0);
    }
}
