//! Raster images and the pixel operations the registration pipeline needs.
//!
//! Samples are 8-bit, row-major, interleaved. Continuous pixel coordinates
//! place the center of pixel `(i, j)` at `(i, j)`, so an image of width `w`
//! spans `[-0.5, w - 0.5]` horizontally. Every geometric routine in the crate
//! (resampling, homographies, boxes) uses this convention.

mod degrade;
mod filter;
mod io;
mod plane;
mod sample;

pub use degrade::{degrade, DegradationParams};
pub use filter::{gaussian_blur, laplacian_variance, to_grayscale};
pub use io::{decode_png, encode_png, read_image, write_image, write_png};
pub use plane::Plane;
pub use sample::{resize_by, sample_bilinear, scale_geometry, warp_with};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("data length {actual} does not match {width}x{height}x{channels}")]
    DataLength {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("negative blur sigma {0}")]
    NegativeSigma(f64),
    #[error("sample point ({x}, {y}) outside image")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid degradation parameters: {0}")]
    InvalidParams(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of interleaved samples per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }

    pub fn from_count(n: usize) -> Result<Self, ImageError> {
        match n {
            1 => Ok(Channels::Gray),
            3 => Ok(Channels::Rgb),
            other => Err(ImageError::UnsupportedChannels(other)),
        }
    }
}

/// Acquisition provenance carried alongside pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub microscope: String,
    pub magnification: u32,
    pub stage_mm: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: Channels,
    data: Vec<u8>,
    meta: Option<RasterMeta>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        channels: Channels,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        let expected = width * height * channels.count();
        if data.len() != expected {
            return Err(ImageError::DataLength {
                width,
                height,
                channels: channels.count(),
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            meta: None,
        })
    }

    /// A raster with every sample set to `value`.
    pub fn filled(
        width: usize,
        height: usize,
        channels: Channels,
        value: u8,
    ) -> Result<Self, ImageError> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels.count()],
        )
    }

    /// Builds a grayscale raster from a per-pixel function.
    pub fn from_fn_gray(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, Channels::Gray, data)
    }

    pub fn with_meta(mut self, meta: RasterMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn meta(&self) -> Option<&RasterMeta> {
        self.meta.as_ref()
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, channel: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels.count() + channel]
    }

    pub fn is_gray(&self) -> bool {
        self.channels == Channels::Gray
    }

    /// Extracts one channel as a float plane.
    pub fn channel_plane(&self, channel: usize) -> Plane {
        let n = self.channels.count();
        let data = self
            .data
            .iter()
            .skip(channel)
            .step_by(n)
            .map(|&v| v as f32)
            .collect();
        Plane::from_vec(self.width, self.height, data)
    }

    /// Luma plane (BT.601 weights) without intermediate rounding.
    pub fn luma_plane(&self) -> Plane {
        match self.channels {
            Channels::Gray => self.channel_plane(0),
            Channels::Rgb => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
                    .collect();
                Plane::from_vec(self.width, self.height, data)
            }
        }
    }

    /// Reassembles a raster from per-channel planes, rounding and clamping.
    pub fn from_planes(planes: &[Plane]) -> Result<Self, ImageError> {
        let channels = Channels::from_count(planes.len())?;
        let (w, h) = (planes[0].width(), planes[0].height());
        let mut data = Vec::with_capacity(w * h * planes.len());
        for i in 0..w * h {
            for p in planes {
                data.push(quantize(p.data()[i]));
            }
        }
        Self::new(w, h, channels, data)
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(matches!(
            Raster::new(2, 2, Channels::Rgb, vec![0; 4]),
            Err(ImageError::DataLength { .. })
        ));
        assert!(matches!(
            Raster::new(0, 2, Channels::Gray, vec![]),
            Err(ImageError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn plane_round_trip_is_lossless() {
        let img = Raster::new(2, 1, Channels::Rgb, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let planes: Vec<_> = (0..3).map(|c| img.channel_plane(c)).collect();
        assert_eq!(Raster::from_planes(&planes).unwrap(), img);
    }
}
