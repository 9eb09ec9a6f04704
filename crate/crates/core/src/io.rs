//! PNG image I/O with the `[-1, 1]` pixel convention.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageShape};

/// Maps an 8-bit value to `p/127.5 − 1`.
pub fn from_u8(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`from_u8`], rounding half away from zero and clamping.
pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<ImageBuffer> {
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let shape = ImageShape::new(rgb.height() as usize, rgb.width() as usize);
    ImageBuffer::new(shape, rgb.into_raw().into_iter().map(from_u8).collect())
}

fn to_rgb(img: &ImageBuffer) -> RgbImage {
    let raw = img.as_slice().iter().map(|v| to_u8(*v)).collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer sized by shape")
}

/// Reads an 8-bit RGB PNG.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    let format = image::guess_format(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if format != ImageFormat::Png {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("expected PNG, found {format:?}"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })?;
    from_dynamic(img, path)
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb(img)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let path = Path::new("<memory>");
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })?;
    from_dynamic(img, path)
}
