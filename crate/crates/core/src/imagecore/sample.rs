use super::{quantize, ImageError, Plane, Raster};

/// Bilinear interpolation of one channel at a subpixel position.
pub fn sample_bilinear(img: &Raster, x: f64, y: f64, channel: usize) -> Result<f64, ImageError> {
    let (w, h) = (img.width(), img.height());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return Err(ImageError::OutOfBounds { x, y });
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v = |xx, yy| img.get(xx, yy, channel) as f64;
    let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
    let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
    Ok(top * (1.0 - fy) + bottom * fy)
}

/// Output size and coordinate map of a uniform rescale by `factor`.
///
/// Returns `(width, height, offset)` where a source coordinate `x` lands at
/// `factor * x + offset` in the rescaled image.
pub fn scale_geometry(width: usize, height: usize, factor: f64) -> (usize, usize, f64) {
    let w = ((width as f64 * factor).round() as usize).max(1);
    let h = ((height as f64 * factor).round() as usize).max(1);
    (w, h, 0.5 * factor - 0.5)
}

impl Plane {
    /// Uniform rescale; downscaling is pre-filtered to limit aliasing.
    pub fn rescaled(&self, factor: f64) -> Plane {
        let (w, h, offset) = scale_geometry(self.width(), self.height(), factor);
        let src = if factor < 1.0 {
            let sigma = ((0.5 / factor).powi(2) - 0.25).sqrt();
            self.blurred(sigma)
        } else {
            self.clone()
        };
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = (y as f64 - offset) / factor;
            for x in 0..w {
                let sx = (x as f64 - offset) / factor;
                out.push(src.sample_clamped(sx, sy));
            }
        }
        Plane::from_vec(w, h, out)
    }
}

/// Uniformly rescales a raster (see [`scale_geometry`] for the coordinate map).
pub fn resize_by(img: &Raster, factor: f64) -> Raster {
    let planes: Vec<Plane> = (0..img.channels().count())
        .map(|c| img.channel_plane(c).rescaled(factor))
        .collect();
    Raster::from_planes(&planes).expect("non-empty planes")
}

/// Inverse-mapped warp: `map` takes a destination pixel position to a source
/// position, or `None` when the destination pixel has no preimage. Pixels
/// mapping outside the source are set to `fill`.
pub fn warp_with(
    src: &Raster,
    width: usize,
    height: usize,
    fill: u8,
    map: impl Fn(f64, f64) -> Option<(f64, f64)>,
) -> Raster {
    let n = src.channels().count();
    let planes: Vec<Plane> = (0..n).map(|c| src.channel_plane(c)).collect();
    let (sw, sh) = ((src.width() - 1) as f64, (src.height() - 1) as f64);
    let mut data = Vec::with_capacity(width * height * n);
    for y in 0..height {
        for x in 0..width {
            match map(x as f64, y as f64) {
                Some((sx, sy)) if sx >= 0.0 && sy >= 0.0 && sx <= sw && sy <= sh => {
                    for p in &planes {
                        data.push(quantize(p.sample_clamped(sx, sy)));
                    }
                }
                _ => data.extend(std::iter::repeat_n(fill, n)),
            }
        }
    }
    Raster::new(width, height, src.channels(), data).expect("warp dimensions")
}
