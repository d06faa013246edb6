//! PNG and binary PNM (P5/P6) codecs.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::{Channels, ImageError, Raster};

fn to_dynamic(img: &Raster) -> DynamicImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        Channels::Gray => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, img.data().to_vec()).expect("raster invariant"),
        ),
        Channels::Rgb => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w, h, img.data().to_vec()).expect("raster invariant"),
        ),
    }
}

fn from_dynamic(img: DynamicImage) -> Result<Raster, ImageError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Raster::new(w, h, Channels::Gray, g.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            Raster::new(w, h, Channels::Gray, img.to_luma8().into_raw())
        }
        other => Raster::new(w, h, Channels::Rgb, other.to_rgb8().into_raw()),
    }
}

fn codec(e: image::ImageError) -> ImageError {
    ImageError::Codec(e.to_string())
}

pub fn encode_png(img: &Raster) -> Result<Vec<u8>, ImageError> {
    let mut buf = Cursor::new(Vec::new());
    to_dynamic(img)
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(codec)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster, ImageError> {
    from_dynamic(image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(codec)?)
}

pub fn write_png(img: &Raster, path: &Path) -> Result<(), ImageError> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Writes PNG or PNM depending on the file extension (`.png`, `.pgm`, `.ppm`).
pub fn write_image(img: &Raster, path: &Path) -> Result<(), ImageError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" | "ppm" | "pnm" => {
            let mut buf = Cursor::new(Vec::new());
            to_dynamic(img)
                .write_to(&mut buf, ImageFormat::Pnm)
                .map_err(codec)?;
            std::fs::write(path, buf.into_inner())?;
            Ok(())
        }
        _ => write_png(img, path),
    }
}

pub fn read_image(path: &Path) -> Result<Raster, ImageError> {
    let bytes = std::fs::read(path)?;
    let format = image::guess_format(&bytes).map_err(codec)?;
    from_dynamic(image::load_from_memory_with_format(&bytes, format).map_err(codec)?)
}
