//! Verification thresholds, attack success rate and image-quality metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, FaceEmbedder};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::par;
use crate::rng::stream_rng;

/// Offset above the maximum impostor score when no score can be accepted.
pub const SATURATION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub tau: f64,
    pub far: f64,
    pub n_impostor_pairs: usize,
    /// True when no impostor score could be accepted within `far`.
    pub saturated: bool,
}

/// Smallest observed score `τ` with `|{s ≥ τ}| / N ≤ far`.
///
/// When even the maximum score would exceed the budget, `τ` is set just
/// above it and the result is marked saturated.
pub fn calibrate_threshold(scores: &[f64], far: f64) -> Result<VerificationThreshold> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no impostor scores".into()));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "far must lie in (0, 1), got {far}"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("impostor score {bad}")));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Largest number of accepted impostors still within budget.
    let allowed = (n as f64 * far + 1e-12).floor() as usize;
    let mut tau = None;
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == v {
            j += 1;
        }
        // `j` scores are ≥ v.
        if j > allowed {
            break;
        }
        tau = Some(v);
        i = j;
    }
    let saturated = tau.is_none();
    if saturated {
        log::warn!("threshold saturated: {n} impostor scores cannot meet far={far}");
    }
    Ok(VerificationThreshold {
        tau: tau.unwrap_or(sorted[0] + SATURATION_EPS),
        far,
        n_impostor_pairs: n,
        saturated,
    })
}

/// Exhaustive cross-identity pairs, subsampled to at most `cap` with a
/// seeded draw. Pairs are index pairs `(i, j)` with `i < j`, in lexicographic
/// order.
pub fn impostor_pairs(identities: &[String], cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for i in 0..identities.len() {
        for j in i + 1..identities.len() {
            if identities[i] != identities[j] {
                all.push((i, j));
            }
        }
    }
    if all.len() <= cap {
        return all;
    }
    let mut rng = stream_rng(seed, "eval/impostor-pairs");
    let mut picked = sample(&mut rng, all.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| all[k]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsrResult {
    pub asr: f64,
    pub scores: Vec<f64>,
}

/// Fraction of scores strictly above `tau`.
pub fn asr_from_scores(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    Ok(scores.iter().filter(|s| **s > tau).count() as f64 / scores.len() as f64)
}

/// Cosine between the embeddings of two images.
pub fn verification_score(emb: &dyn FaceEmbedder, a: &ImageBuffer, b: &Embedding) -> Result<f64> {
    emb.face_embed(a)?
        .cosine(b)
        .ok_or(Error::DegenerateDirection("face embedding"))
}

pub fn attack_success_rate(
    protected: &[ImageBuffer],
    target: &ImageBuffer,
    emb: &dyn FaceEmbedder,
    threshold: &VerificationThreshold,
) -> Result<AsrResult> {
    if protected.is_empty() {
        return Err(Error::InvalidArgument("no protected images".into()));
    }
    let t = emb.face_embed(target)?;
    let scores = par::try_map(protected, |img| verification_score(emb, img, &t))?;
    Ok(AsrResult {
        asr: asr_from_scores(&scores, threshold.tau)?,
        scores,
    })
}

/// Peak signal-to-noise ratio in dB for `[-1, 1]` images (range 2);
/// identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.as_slice().len() as f64;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (4.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_RANGE: f64 = 2.0;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over all
/// fully-contained window positions, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let per_channel = par::map_range(CHANNELS, |ch| {
        let mut total = 0.0;
        for r in 0..oh {
            for c in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in 0..SSIM_WINDOW {
                    for dc in 0..SSIM_WINDOW {
                        let k = win[dr * SSIM_WINDOW + dc];
                        let x = a.get(r + dr, c + dc, ch);
                        let y = b.get(r + dr, c + dc, ch);
                        mx += k * x;
                        my += k * y;
                        xx += k * x * x;
                        yy += k * y * y;
                        xy += k * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total / (oh * ow) as f64
    });
    Ok(per_channel.iter().sum::<f64>() / CHANNELS as f64)
}

/// Ridge added to covariances when a set has no more samples than dimensions.
pub const FID_RIDGE: f64 = 1e-6;

fn moments(feats: &[Embedding], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    let mut mean = DVector::zeros(dim);
    for f in feats {
        if f.dim() != dim {
            return Err(Error::shape(dim, f.dim()));
        }
        mean += DVector::from_column_slice(f.as_slice());
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in feats {
        let d = DVector::from_column_slice(f.as_slice()) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    if n <= dim {
        cov += DMatrix::identity(dim, dim) * FID_RIDGE;
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace of the principal square root of `a·b` for symmetric PSD `a`, `b`,
/// computed as `Tr √(√a · b · √a)`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = sym_sqrt(a);
    let m = &sa * b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(feats_a: &[Embedding], feats_b: &[Embedding]) -> Result<f64> {
    if feats_a.len() < 2 || feats_b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fid needs at least 2 samples per set, got {} and {}",
            feats_a.len(),
            feats_b.len()
        )));
    }
    let dim = feats_a[0].dim();
    let (ma, ca) = moments(feats_a, dim)?;
    let (mb, cb) = moments(feats_b, dim)?;
    if ma == mb && ca == cb {
        return Ok(0.0);
    }
    let mean_term = (&ma - &mb).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub tau: f64,
    pub far: f64,
    pub asr: f64,
    /// ASR of the unprotected sources, for reference.
    pub asr_clean: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub fid: Option<f64>,
    pub n_images: usize,
    pub config_hash: String,
}
