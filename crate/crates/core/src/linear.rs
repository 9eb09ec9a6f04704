//! Fixed (non-trainable) linear operators used inside differentiable graphs.
//!
//! Every operator knows how to apply itself and its transpose, which is all
//! reverse-mode differentiation needs. Feature maps use the same row-major,
//! channel-interleaved layout as [`ImageBuffer`](crate::image::ImageBuffer).

use std::fmt;

use crate::par;

pub trait LinearMap: Send + Sync + fmt::Debug {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;

    /// Writes `A x` into `out` (overwriting).
    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// Accumulates `Aᵀ g` into `out`.
    fn apply_transpose(&self, g: &[f64], out: &mut [f64]);
}

/// Dense row-major matrix with a cached transpose.
#[derive(Clone)]
pub struct DenseMap {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    transposed: Vec<f64>,
}

impl fmt::Debug for DenseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMap")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl DenseMap {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), rows * cols, "dense weight length");
        let mut transposed = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = weights[r * cols + c];
            }
        }
        Self {
            rows,
            cols,
            weights,
            transposed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearMap for DenseMap {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        par::for_each_chunk_mut(out, 1, |r, o| {
            o[0] = dot(self.row(r), x);
        });
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let rows = self.rows;
        par::for_each_chunk_mut(out, 1, |c, o| {
            o[0] += dot(&self.transposed[c * rows..(c + 1) * rows], g);
        });
    }
}

/// Non-overlapping `factor x factor` average pooling over an
/// `height x width x channels` map.
#[derive(Debug, Clone)]
pub struct AvgPool {
    height: usize,
    width: usize,
    channels: usize,
    factor: usize,
}

impl AvgPool {
    /// Panics unless both spatial dimensions are divisible by `factor`.
    pub fn new(height: usize, width: usize, channels: usize, factor: usize) -> Self {
        assert!(factor > 0 && height.is_multiple_of(factor) && width.is_multiple_of(factor));
        Self {
            height,
            width,
            channels,
            factor,
        }
    }

    pub fn out_height(&self) -> usize {
        self.height / self.factor
    }

    pub fn out_width(&self) -> usize {
        self.width / self.factor
    }
}

impl LinearMap for AvgPool {
    fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn output_len(&self) -> usize {
        self.out_height() * self.out_width() * self.channels
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (k, c, ow) = (self.factor, self.channels, self.out_width());
        let norm = 1.0 / (k * k) as f64;
        par::for_each_chunk_mut(out, ow * c, |orow, o| {
            o.iter_mut().for_each(|v| *v = 0.0);
            for dr in 0..k {
                let r = orow * k + dr;
                for ocol in 0..ow {
                    for dc in 0..k {
                        let base = (r * self.width + ocol * k + dc) * c;
                        for ch in 0..c {
                            o[ocol * c + ch] += x[base + ch];
                        }
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= norm);
        });
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let (k, c, ow) = (self.factor, self.channels, self.out_width());
        let norm = 1.0 / (k * k) as f64;
        par::for_each_chunk_mut(out, self.width * c, |r, o| {
            let orow = r / k;
            for col in 0..self.width {
                let src = (orow * ow + col / k) * c;
                for ch in 0..c {
                    o[col * c + ch] += g[src + ch] * norm;
                }
            }
        });
    }
}

/// Stride-1, zero-padded ("same") 2-D convolution with a fixed kernel.
///
/// Kernel layout is `[out_ch][in_ch][k][k]` with odd `k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    height: usize,
    width: usize,
    in_channels: usize,
    out_channels: usize,
    ksize: usize,
    kernel: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        height: usize,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        ksize: usize,
        kernel: Vec<f64>,
    ) -> Self {
        assert!(ksize % 2 == 1, "kernel size must be odd");
        assert_eq!(kernel.len(), out_channels * in_channels * ksize * ksize);
        Self {
            height,
            width,
            in_channels,
            out_channels,
            ksize,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, dy: usize, dx: usize) -> f64 {
        self.kernel[((o * self.in_channels + i) * self.ksize + dy) * self.ksize + dx]
    }
}

impl LinearMap for Conv2d {
    fn input_len(&self) -> usize {
        self.height * self.width * self.in_channels
    }

    fn output_len(&self) -> usize {
        self.height * self.width * self.out_channels
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let half = (self.ksize / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let (cin, cout) = (self.in_channels, self.out_channels);
        par::for_each_chunk_mut(out, self.width * cout, |row, o| {
            for col in 0..self.width {
                for oc in 0..cout {
                    let mut acc = 0.0;
                    for dy in 0..self.ksize {
                        let r = row as isize + dy as isize - half;
                        if r < 0 || r >= h {
                            continue;
                        }
                        for dx in 0..self.ksize {
                            let c = col as isize + dx as isize - half;
                            if c < 0 || c >= w {
                                continue;
                            }
                            let base = (r as usize * self.width + c as usize) * cin;
                            for ic in 0..cin {
                                acc += self.weight(oc, ic, dy, dx) * x[base + ic];
                            }
                        }
                    }
                    o[col * cout + oc] = acc;
                }
            }
        });
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        // Gather form: input (r, c, ic) receives from outputs (r - dy + half, ...).
        let half = (self.ksize / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let (cin, cout) = (self.in_channels, self.out_channels);
        par::for_each_chunk_mut(out, self.width * cin, |row, o| {
            for col in 0..self.width {
                for ic in 0..cin {
                    let mut acc = 0.0;
                    for dy in 0..self.ksize {
                        let orow = row as isize - dy as isize + half;
                        if orow < 0 || orow >= h {
                            continue;
                        }
                        for dx in 0..self.ksize {
                            let ocol = col as isize - dx as isize + half;
                            if ocol < 0 || ocol >= w {
                                continue;
                            }
                            let base = (orow as usize * self.width + ocol as usize) * cout;
                            for oc in 0..cout {
                                acc += self.weight(oc, ic, dy, dx) * g[base + oc];
                            }
                        }
                    }
                    o[col * cin + ic] += acc;
                }
            }
        });
    }
}

/// Sums the channels at each spatial position: `H x W x C -> H x W`.
#[derive(Debug, Clone)]
pub struct ChannelSum {
    positions: usize,
    channels: usize,
}

impl ChannelSum {
    pub fn new(positions: usize, channels: usize) -> Self {
        Self {
            positions,
            channels,
        }
    }
}

impl LinearMap for ChannelSum {
    fn input_len(&self) -> usize {
        self.positions * self.channels
    }

    fn output_len(&self) -> usize {
        self.positions
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, px) in out.iter_mut().zip(x.chunks(self.channels)) {
            *o = px.iter().sum();
        }
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (gv, px) in g.iter().zip(out.chunks_mut(self.channels)) {
            px.iter_mut().for_each(|o| *o += gv);
        }
    }
}

/// Transpose of [`ChannelSum`]: repeats each position value over channels.
#[derive(Debug, Clone)]
pub struct ChannelBroadcast {
    positions: usize,
    channels: usize,
}

impl ChannelBroadcast {
    pub fn new(positions: usize, channels: usize) -> Self {
        Self {
            positions,
            channels,
        }
    }
}

impl LinearMap for ChannelBroadcast {
    fn input_len(&self) -> usize {
        self.positions
    }

    fn output_len(&self) -> usize {
        self.positions * self.channels
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (xv, px) in x.iter().zip(out.chunks_mut(self.channels)) {
            px.iter_mut().for_each(|o| *o = *xv);
        }
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (o, px) in out.iter_mut().zip(g.chunks(self.channels)) {
            *o += px.iter().sum::<f64>();
        }
    }
}
