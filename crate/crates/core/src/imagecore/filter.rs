use super::{Channels, ImageError, Plane, Raster};

/// BT.601 luma, rounded to nearest (halves round up).
pub fn to_grayscale(img: &Raster) -> Raster {
    match img.channels() {
        Channels::Gray => img.clone(),
        Channels::Rgb => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|p| {
                    let acc = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
                    ((acc + 500) / 1000) as u8
                })
                .collect();
            let out = Raster::new(img.width(), img.height(), Channels::Gray, data)
                .expect("dimensions preserved");
            match img.meta() {
                Some(m) => out.with_meta(m.clone()),
                None => out,
            }
        }
    }
}

pub fn gaussian_blur(img: &Raster, sigma: f64) -> Result<Raster, ImageError> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(ImageError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let planes: Vec<Plane> = (0..img.channels().count())
        .map(|c| img.channel_plane(c).blurred(sigma))
        .collect();
    let out = Raster::from_planes(&planes)?;
    Ok(match img.meta() {
        Some(m) => out.with_meta(m.clone()),
        None => out,
    })
}

/// Variance of the 4-neighbour Laplacian of the luma plane over interior
/// pixels. Larger means sharper.
pub fn laplacian_variance(img: &Raster) -> f64 {
    let p = img.luma_plane();
    let (w, h) = (p.width(), p.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut sum = 0f64;
    let mut sum_sq = 0f64;
    let mut n = 0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = (p.at(x - 1, y) + p.at(x + 1, y) + p.at(x, y - 1) + p.at(x, y + 1)
                - 4.0 * p.at(x, y)) as f64;
            sum += lap;
            sum_sq += lap * lap;
            n += 1.0;
        }
    }
    let mean = sum / n;
    sum_sq / n - mean * mean
}
