use std::fmt;

use crate::error::{Error, Result};

/// Number of color channels in every pixel-domain buffer.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of scalar entries (`pixels * CHANNELS`).
    pub const fn len(&self) -> usize {
        self.pixels() * CHANNELS
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, CHANNELS)
    }
}

/// An `H x W x 3` image stored row-major with interleaved channels.
///
/// Values follow the `[-1, 1]` convention, but the buffer itself does not
/// clamp: intermediate diffusion states routinely leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    shape: ImageShape,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: ImageShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for row in 0..shape.height {
            for col in 0..shape.width {
                for ch in 0..CHANNELS {
                    data.push(f(row, col, ch));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Clamps into `[-1, 1]` and returns how many entries were changed.
    pub fn clamp_unit(&mut self) -> usize {
        let mut clamped = 0;
        for v in &mut self.data {
            let c = v.clamp(-1.0, 1.0);
            if c != *v {
                clamped += 1;
                *v = c;
            }
        }
        clamped
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
