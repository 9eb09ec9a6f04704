//! Training objectives.
//!
//! [`graph`] records each loss on a [`Tape`] so it can be differentiated;
//! the free functions in this module are value-only wrappers with strict
//! argument checking.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, FaceEmbedder, ImageEncoder, JointEncoders, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::regions::{hm_image, EmptyRegion, RegionMasks};
use crate::tape::{Tape, Var};

/// How cosine-based losses treat vanishing norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormGuard {
    /// Zero norm is an error.
    Strict,
    /// `ε` is added to each norm; used inside training loops, where the
    /// first iterate can reproduce its input exactly.
    Stabilized(f64),
}

/// Norm stabilizer used by the fine-tuning loops.
pub const TRAINING_GUARD: NormGuard = NormGuard::Stabilized(1e-8);

/// Loss weights for both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub removal: f64,
    pub identity: f64,
    pub lpips: f64,
    pub makeup: f64,
    pub direction: f64,
    pub pixel: f64,
    pub adversarial: f64,
    pub visual: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            removal: 3.0,
            identity: 1.0,
            lpips: 1.0,
            makeup: 1.0,
            direction: 1.0,
            pixel: 0.1,
            adversarial: 1.0,
            visual: 1.0,
            l1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self {
            removal: 0.0,
            identity: 0.0,
            lpips: 0.0,
            makeup: 0.0,
            direction: 0.0,
            pixel: 0.0,
            adversarial: 0.0,
            visual: 0.0,
            l1: 0.0,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("removal", self.removal),
            ("identity", self.identity),
            ("lpips", self.lpips),
            ("makeup", self.makeup),
            ("direction", self.direction),
            ("pixel", self.pixel),
            ("adversarial", self.adversarial),
            ("visual", self.visual),
            ("l1", self.l1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.entries() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight `{name}` must be a finite non-negative number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Differentiable building blocks.
pub mod graph {
    use super::*;
    use crate::encoders::FeatureMap;
    use crate::linear::{ChannelBroadcast, ChannelSum};

    fn guarded_norm(tape: &mut Tape, v: Var, guard: NormGuard, what: &'static str) -> Result<Var> {
        let n = tape.norm(v);
        match guard {
            NormGuard::Strict => {
                if tape.scalar(n) == 0.0 {
                    return Err(Error::DegenerateDirection(what));
                }
                Ok(n)
            }
            NormGuard::Stabilized(eps) => Ok(tape.offset(n, eps)),
        }
    }

    /// Cosine similarity as a length-1 node.
    pub fn cosine(
        tape: &mut Tape,
        a: Var,
        b: Var,
        guard: NormGuard,
        names: (&'static str, &'static str),
    ) -> Result<Var> {
        if tape.dim(a) != tape.dim(b) {
            return Err(Error::shape(tape.dim(a), tape.dim(b)));
        }
        let na = guarded_norm(tape, a, guard, names.0)?;
        let nb = guarded_norm(tape, b, guard, names.1)?;
        let dot = tape.dot(a, b);
        let denom = tape.mul(na, nb);
        let inv = tape.recip(denom);
        Ok(tape.mul(dot, inv))
    }

    fn one_minus(tape: &mut Tape, v: Var) -> Var {
        let neg = tape.scale(v, -1.0);
        tape.offset(neg, 1.0)
    }

    /// `1 − cos(a, b)`.
    pub fn direction_loss(tape: &mut Tape, a: Var, b: Var, guard: NormGuard) -> Result<Var> {
        let c = cosine(tape, a, b, guard, ("first direction", "second direction"))?;
        Ok(one_minus(tape, c))
    }

    /// `1 − cos(E(a), E(b))` for precomputed embeddings.
    pub fn identity_loss(tape: &mut Tape, ea: Var, eb: Var, guard: NormGuard) -> Result<Var> {
        let c = cosine(tape, ea, eb, guard, ("first embedding", "second embedding"))?;
        Ok(one_minus(tape, c))
    }

    /// Mean over members of `1 − cos(m_k(x'), m_k(x*))`; also returns each
    /// member's cosine value.
    pub fn ensemble_attack(
        tape: &mut Tape,
        embeddings: &[Var],
        targets: &[Var],
        guard: NormGuard,
    ) -> Result<(Var, Vec<f64>)> {
        if embeddings.is_empty() || embeddings.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "ensemble needs K >= 1 matched embeddings/targets, got {} and {}",
                embeddings.len(),
                targets.len()
            )));
        }
        let k = embeddings.len() as f64;
        let mut cosines = Vec::with_capacity(embeddings.len());
        let mut acc: Option<Var> = None;
        for (e, t) in embeddings.iter().zip(targets) {
            let c = cosine(
                tape,
                *e,
                *t,
                guard,
                ("protected embedding", "target embedding"),
            )?;
            cosines.push(tape.scalar(c));
            let term = one_minus(tape, c);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        let sum = acc.expect("non-empty ensemble");
        Ok((tape.scale(sum, 1.0 / k), cosines))
    }

    /// Mean absolute difference.
    pub fn mean_abs(tape: &mut Tape, a: Var, b: Var) -> Var {
        let d = tape.sub(a, b);
        let ad = tape.abs(d);
        tape.mean(ad)
    }

    fn unit_normalize(tape: &mut Tape, fm: &FeatureMap) -> Var {
        let sq = tape.square(fm.var);
        let per_pos = tape.linear(sq, Arc::new(ChannelSum::new(fm.positions, fm.channels)));
        let norm = tape.sqrt(per_pos);
        let norm = tape.offset(norm, 1e-10);
        let inv = tape.recip(norm);
        let inv = tape.linear(
            inv,
            Arc::new(ChannelBroadcast::new(fm.positions, fm.channels)),
        );
        tape.mul(fm.var, inv)
    }

    /// Per layer: channel-normalize both maps, sum squared differences over
    /// channels and average over positions; then sum over layers.
    pub fn perceptual_distance(
        tape: &mut Tape,
        fa: &[FeatureMap],
        fb: &[FeatureMap],
    ) -> Result<Var> {
        if fa.len() != fb.len() || fa.is_empty() {
            return Err(Error::InvalidArgument(
                "perceptual distance needs matching non-empty layer lists".into(),
            ));
        }
        let mut acc: Option<Var> = None;
        for (a, b) in fa.iter().zip(fb) {
            let na = unit_normalize(tape, a);
            let nb = unit_normalize(tape, b);
            let d = tape.sub(na, nb);
            let sq = tape.square(d);
            let s = tape.sum(sq);
            let layer = tape.scale(s, 1.0 / a.positions.max(1) as f64);
            acc = Some(match acc {
                None => layer,
                Some(prev) => tape.add(prev, layer),
            });
        }
        Ok(acc.expect("non-empty layers"))
    }

    /// Perceptual distance plus `l1_weight · mean|x' − x|`.
    pub fn visual_loss(
        tape: &mut Tape,
        x_prime: Var,
        x: Var,
        perc: &dyn PerceptualExtractor,
        shape: crate::image::ImageShape,
        l1_weight: f64,
    ) -> Result<Var> {
        let fa = perc.features_on_tape(tape, x_prime, shape)?;
        let fb = perc.features_on_tape(tape, x, shape)?;
        let p = perceptual_distance(tape, &fa, &fb)?;
        let l1 = mean_abs(tape, x_prime, x);
        Ok(tape.lin_comb(p, 1.0, l1, l1_weight))
    }

    /// `mean |x' − target|` over the entries flagged in `matched`.
    ///
    /// `target` is a constant: no gradient flows through the histogram
    /// matching itself.
    pub fn pixel_makeup_loss(
        tape: &mut Tape,
        x_prime: Var,
        target: &[f64],
        matched: &[bool],
    ) -> Var {
        let count = matched.iter().filter(|m| **m).count();
        if count == 0 {
            return tape.constant(vec![0.0]);
        }
        let tv = tape.constant(target.to_vec());
        let d = tape.sub(x_prime, tv);
        let ad = tape.abs(d);
        let mask: Arc<[f64]> = matched.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        let masked = tape.mul_const(ad, mask);
        let s = tape.sum(masked);
        tape.scale(s, 1.0 / count as f64)
    }

    /// `Σ wᵢ·termᵢ`.
    pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
        let mut acc = tape.constant(vec![0.0]);
        for (v, w) in terms {
            let s = tape.scale(*v, *w);
            acc = tape.add(acc, s);
        }
        acc
    }
}

fn strict_direction(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let cos = a
        .cosine(b)
        .ok_or(Error::DegenerateDirection(if a.norm() == 0.0 {
            "first direction"
        } else {
            "second direction"
        }))?;
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// `1 − cos(Δa, Δb)`, in `[0, 2]`.
pub fn direction_loss(delta_a: &Embedding, delta_b: &Embedding) -> Result<f64> {
    strict_direction(delta_a, delta_b)
}

/// Directional removal loss: the change `E_I(ŷ) − E_I(y)` against the text
/// direction `E_T(clean) − E_T(makeup)`.
pub fn makeup_removal_loss(
    y: &ImageBuffer,
    y_hat: &ImageBuffer,
    encoders: &JointEncoders,
    prompt_clean: &str,
    prompt_makeup: &str,
) -> Result<f64> {
    let delta_img = encoders
        .image()
        .embed_image(y_hat)?
        .minus(&encoders.image().embed_image(y)?)?;
    let delta_txt = text_direction(encoders, prompt_clean, prompt_makeup)?;
    strict_direction(&delta_img, &delta_txt)
}

/// `E_T(clean) − E_T(makeup)`.
pub fn text_direction(
    encoders: &JointEncoders,
    prompt_clean: &str,
    prompt_makeup: &str,
) -> Result<Embedding> {
    encoders
        .text()
        .embed_text(prompt_clean)?
        .minus(&encoders.text().embed_text(prompt_makeup)?)
}

/// Reference makeup direction `E_I(y) − E_I(ŷ)`.
pub fn reference_direction(
    enc: &dyn ImageEncoder,
    y: &ImageBuffer,
    y_hat: &ImageBuffer,
) -> Result<Embedding> {
    enc.embed_image(y)?.minus(&enc.embed_image(y_hat)?)
}

/// `1 − cos(E_I(x') − E_I(x), E_I(y) − E_I(ŷ))`.
pub fn makeup_direction_loss(
    x: &ImageBuffer,
    x_prime: &ImageBuffer,
    y: &ImageBuffer,
    y_hat: &ImageBuffer,
    enc: &dyn ImageEncoder,
) -> Result<f64> {
    let delta_x = enc.embed_image(x_prime)?.minus(&enc.embed_image(x)?)?;
    let delta_ref = reference_direction(enc, y, y_hat)?;
    strict_direction(&delta_x, &delta_ref)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelLoss {
    pub value: f64,
    /// Regions skipped because one side had no pixels.
    pub skipped: Vec<EmptyRegion>,
}

/// Mean absolute deviation between `x'` and its histogram-matched target,
/// over matched region entries.
pub fn pixel_makeup_loss(
    x_prime: &ImageBuffer,
    y: &ImageBuffer,
    masks_x: &RegionMasks,
    masks_y: &RegionMasks,
) -> Result<PixelLoss> {
    let hm = hm_image(x_prime, y, masks_x, masks_y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x_prime.as_slice().to_vec());
    let l = graph::pixel_makeup_loss(&mut tape, xv, hm.image.as_slice(), &hm.matched);
    Ok(PixelLoss {
        value: tape.scalar(l),
        skipped: hm.skipped,
    })
}

fn embed_pair(
    emb: &dyn FaceEmbedder,
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> Result<(Embedding, Embedding)> {
    Ok((emb.face_embed(a)?, emb.face_embed(b)?))
}

fn strict_cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let cos = a
        .cosine(b)
        .ok_or(Error::DegenerateDirection("face embedding"))?;
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// `(1/K)·Σ_k [1 − cos(m_k(x'), m_k(x*))]`.
pub fn ensemble_attack_loss(
    x_prime: &ImageBuffer,
    x_star: &ImageBuffer,
    embedders: &[&dyn FaceEmbedder],
) -> Result<f64> {
    if embedders.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one embedder".into(),
        ));
    }
    let mut sum = 0.0;
    for emb in embedders {
        let (a, b) = embed_pair(*emb, x_prime, x_star)?;
        sum += strict_cosine_distance(&a, &b)?;
    }
    Ok(sum / embedders.len() as f64)
}

/// `1 − cos(emb(a), emb(b))`.
pub fn identity_loss(a: &ImageBuffer, b: &ImageBuffer, emb: &dyn FaceEmbedder) -> Result<f64> {
    let (ea, eb) = embed_pair(emb, a, b)?;
    strict_cosine_distance(&ea, &eb)
}

/// Perceptual distance between `x'` and `x` plus `l1_weight · mean|x' − x|`.
pub fn visual_loss(
    x_prime: &ImageBuffer,
    x: &ImageBuffer,
    perc: &dyn PerceptualExtractor,
    l1_weight: f64,
) -> Result<f64> {
    x_prime.ensure_same_shape(x)?;
    let mut tape = Tape::new();
    let a = tape.constant(x_prime.as_slice().to_vec());
    let b = tape.constant(x.as_slice().to_vec());
    let v = graph::visual_loss(&mut tape, a, b, perc, x.shape(), l1_weight)?;
    Ok(tape.scalar(v))
}

/// Perceptual distance alone (the LPIPS-style term).
pub fn perceptual_loss(
    a: &ImageBuffer,
    b: &ImageBuffer,
    perc: &dyn PerceptualExtractor,
) -> Result<f64> {
    visual_loss(a, b, perc, 0.0)
}

/// Weighted total with its per-term breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage1Terms {
    pub removal: f64,
    pub identity: f64,
    pub lpips: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage2Terms {
    pub direction: f64,
    pub pixel: f64,
    pub adversarial: f64,
    pub visual: f64,
}

/// `λ_MR·L_MR + λ_id·L_id + λ_LPIPS·L_LPIPS`.
pub fn stage1_total(terms: Stage1Terms, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let total = w.removal * terms.removal + w.identity * terms.identity + w.lpips * terms.lpips;
    Ok(LossBreakdown {
        total,
        terms: BTreeMap::from([
            ("removal".to_string(), terms.removal),
            ("identity".to_string(), terms.identity),
            ("lpips".to_string(), terms.lpips),
        ]),
    })
}

/// `λ_MT·(λ_dir·L_dir + λ_px·L_px) + λ_adv·L_adv + λ_vis·L_vis`.
pub fn stage2_total(terms: Stage2Terms, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let makeup = w.direction * terms.direction + w.pixel * terms.pixel;
    let total = w.makeup * makeup + w.adversarial * terms.adversarial + w.visual * terms.visual;
    Ok(LossBreakdown {
        total,
        terms: BTreeMap::from([
            ("direction".to_string(), terms.direction),
            ("pixel".to_string(), terms.pixel),
            ("makeup".to_string(), makeup),
            ("adversarial".to_string(), terms.adversarial),
            ("visual".to_string(), terms.visual),
        ]),
    })
}
