//! Facial region label maps and region-wise histogram matching.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageShape, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Skin = 1,
    Lips = 2,
    Eyes = 3,
}

impl Region {
    /// Regions that take part in makeup matching.
    pub const MAKEUP: [Region; 3] = [Region::Skin, Region::Lips, Region::Eyes];

    pub fn from_label(v: u8) -> Option<Region> {
        match v {
            0 => Some(Region::Background),
            1 => Some(Region::Skin),
            2 => Some(Region::Lips),
            3 => Some(Region::Eyes),
            _ => None,
        }
    }
}

/// Per-pixel region labels for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl RegionMasks {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(height * width, labels.len()));
        }
        if let Some(i) = labels.iter().position(|v| Region::from_label(*v).is_none()) {
            return Err(Error::InvalidLabel {
                value: labels[i],
                row: i / width,
                col: i % width,
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(shape: ImageShape) -> Self {
        Self {
            height: shape.height,
            width: shape.width,
            labels: vec![0; shape.pixels()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn region_at(&self, row: usize, col: usize) -> Region {
        Region::from_label(self.labels[row * self.width + col]).expect("validated label")
    }

    /// Pixel indices (row-major) carrying `region`.
    pub fn pixels(&self, region: Region) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == region as u8)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn ensure_matches(&self, img: &ImageBuffer) -> Result<()> {
        if self.height != img.height() || self.width != img.width() {
            return Err(Error::shape(
                img.shape(),
                format!("mask {}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// Path of the label map paired with `image_path` inside `masks_dir`.
pub fn mask_path_for(image_path: &Path, masks_dir: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    masks_dir.join(format!("{stem}.mask.png"))
}

/// Reads an 8-bit single-channel PNG label map.
pub fn load_label_map(path: &Path, expected: Option<ImageShape>) -> Result<RegionMasks> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("expected 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if let Some(shape) = expected {
        if shape.height != h || shape.width != w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", shape.height, shape.width),
                actual: format!("{h}x{w} in {}", path.display()),
            });
        }
    }
    RegionMasks::new(h, w, gray.into_raw())
}

pub fn save_label_map(masks: &RegionMasks, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        masks.width as u32,
        masks.height as u32,
        masks.labels.clone(),
    )
    .expect("label buffer sized by construction");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn stable_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // sort_by is stable, so ties keep their original index order. Adding
    // 0.0 folds -0.0 into +0.0 so signed zeros tie.
    order.sort_by(|&a, &b| (values[a] + 0.0).total_cmp(&(values[b] + 0.0)));
    let mut ranks = vec![0; values.len()];
    for (rank, idx) in order.into_iter().enumerate() {
        ranks[idx] = rank;
    }
    ranks
}

/// Rank-based histogram matching of `src` onto the distribution of `reference`.
///
/// The value at source rank `r` (ties broken by position) becomes the
/// reference quantile at fractional index `r·(m−1)/(n−1)`, linearly
/// interpolated between neighbouring sorted reference values. Equal lengths
/// therefore reproduce the sorted reference exactly. A single source value
/// maps to the reference median position.
pub fn histogram_match_region(src: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if src.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument(
            "histogram matching needs non-empty source and reference".into(),
        ));
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (n, m) = (src.len(), sorted.len());
    let ranks = stable_ranks(src);
    Ok(ranks
        .into_iter()
        .map(|rank| {
            // Fractional index as integer numerator over `denom` to keep
            // equal-length matching exact.
            let (num, denom) = if n == 1 {
                (m - 1, 2)
            } else {
                (rank * (m - 1), n - 1)
            };
            let lo = num / denom;
            let rem = num % denom;
            if rem == 0 {
                sorted[lo]
            } else {
                let frac = rem as f64 / denom as f64;
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSide {
    Source,
    Reference,
}

/// A region skipped because it had no pixels on one side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmptyRegion {
    pub region: Region,
    pub side: MaskSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramMatch {
    pub image: ImageBuffer,
    /// Per-entry flag: true where the entry was replaced by a matched value.
    pub matched: Vec<bool>,
    pub skipped: Vec<EmptyRegion>,
}

/// `HM(x', y)`: per region and per channel, replaces `x'`'s values by
/// histogram-matched values drawn from `y`'s same region. Background and
/// skipped regions are copied from `x'` unchanged.
pub fn hm_image(
    x_prime: &ImageBuffer,
    y: &ImageBuffer,
    masks_x: &RegionMasks,
    masks_y: &RegionMasks,
) -> Result<HistogramMatch> {
    masks_x.ensure_matches(x_prime)?;
    masks_y.ensure_matches(y)?;
    let mut out = x_prime.clone();
    let mut matched = vec![false; x_prime.as_slice().len()];
    let mut skipped = Vec::new();
    for region in Region::MAKEUP {
        let px = masks_x.pixels(region);
        let py = masks_y.pixels(region);
        for (empty, side) in [
            (px.is_empty(), MaskSide::Source),
            (py.is_empty(), MaskSide::Reference),
        ] {
            if empty {
                skipped.push(EmptyRegion { region, side });
            }
        }
        if px.is_empty() || py.is_empty() {
            continue;
        }
        for ch in 0..CHANNELS {
            let src: Vec<f64> = px
                .iter()
                .map(|p| x_prime.as_slice()[p * CHANNELS + ch])
                .collect();
            let refv: Vec<f64> = py.iter().map(|p| y.as_slice()[p * CHANNELS + ch]).collect();
            let m = histogram_match_region(&src, &refv)?;
            for (p, v) in px.iter().zip(m) {
                out.as_mut_slice()[p * CHANNELS + ch] = v;
                matched[p * CHANNELS + ch] = true;
            }
        }
    }
    Ok(HistogramMatch {
        image: out,
        matched,
        skipped,
    })
}
