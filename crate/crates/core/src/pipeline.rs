//! The two fine-tuning stages and the protection entry point.
//!
//! Both stages share one loop: latents are computed once with the frozen
//! denoiser, then a trainable copy regenerates each image from its latent on
//! a [`Tape`] and takes an Adam step on the stage objective.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_invert, ddim_sample, param_checksum, sample_on_tape, Denoiser};
use crate::encoders::{Embedding, FaceEmbedder, ImageEncoder, JointEncoders, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{graph, text_direction, LossWeights, TRAINING_GUARD};
use crate::optim::{Adam, LrMode, LrSchedule};
use crate::par;
use crate::regions::{hm_image, RegionMasks};
use crate::schedule::{NoiseSchedule, TimestepSequence};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub t0: usize,
    pub s_inv: usize,
    pub s_sam: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_step: usize,
    pub lr_slope: f64,
    pub lr_mode: LrMode,
    pub weights: LossWeights,
    pub seed: u64,
    pub prompt_clean: String,
    pub prompt_makeup: String,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            t0: 60,
            s_inv: 20,
            s_sam: 6,
            epochs: 6,
            base_lr: 4e-6,
            lr_step: 50,
            lr_slope: 0.2,
            lr_mode: LrMode::Additive,
            weights: LossWeights::default(),
            seed: 0,
            prompt_clean: "face without makeup".into(),
            prompt_makeup: "face with makeup".into(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.t0 == 0 || self.t0 > sched.t_full() {
            return bad(format!(
                "t0 must lie in 1..={}, got {}",
                sched.t_full(),
                self.t0
            ));
        }
        if self.s_inv == 0 || self.s_inv > self.t0 || self.s_sam == 0 || self.s_sam > self.t0 {
            return bad(format!(
                "s_inv and s_sam must lie in 1..=t0 ({}), got {} and {}",
                self.t0, self.s_inv, self.s_sam
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        self.weights.validate()?;
        self.lr_schedule().map(|_| ())
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.lr_step, self.lr_slope, self.lr_mode)
    }

    pub fn inversion_steps(&self, sched: &NoiseSchedule) -> Result<TimestepSequence> {
        TimestepSequence::uniform(self.t0, self.s_inv, sched.t_full())
    }

    pub fn sampling_steps(&self, sched: &NoiseSchedule) -> Result<TimestepSequence> {
        TimestepSequence::uniform(self.t0, self.s_sam, sched.t_full())
    }

    /// `full` or `wo-dir` (makeup-direction term disabled), plus `t0`.
    pub fn experiment_tag(&self) -> String {
        let variant = if self.weights.direction == 0.0 {
            "wo-dir"
        } else {
            "full"
        };
        format!("{variant}-t0-{}", self.t0)
    }
}

/// Learning rate for iteration `iter` (counted from 0).
pub fn lr_at(iter: usize, cfg: &FineTuneConfig) -> Result<f64> {
    Ok(cfg.lr_schedule()?.lr_at(iter))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Removal,
    Transfer,
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub tag: String,
    pub epoch: usize,
    pub iter: usize,
    pub image: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub cosines: BTreeMap<String, f64>,
}

/// Fine-tuned parameters together with the settings they are valid for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedModel {
    pub denoiser: String,
    pub frozen_checksum: String,
    pub t_full: usize,
    pub t0: usize,
    pub s_inv: usize,
    pub s_sam: usize,
    pub params: Vec<f64>,
}

impl TunedModel {
    /// Artifacts that leave the frozen parameters untouched.
    pub fn untuned(denoiser: &dyn Denoiser, sched: &NoiseSchedule, cfg: &FineTuneConfig) -> Self {
        Self {
            denoiser: denoiser.name().to_string(),
            frozen_checksum: param_checksum(denoiser.params()),
            t_full: sched.t_full(),
            t0: cfg.t0,
            s_inv: cfg.s_inv,
            s_sam: cfg.s_sam,
            params: denoiser.params().to_vec(),
        }
    }

    pub fn checksum(&self) -> String {
        param_checksum(&self.params)
    }

    /// Checks that these parameters belong to `frozen` and to the
    /// discretization in `cfg`.
    pub fn ensure_compatible(
        &self,
        frozen: &dyn Denoiser,
        sched: &NoiseSchedule,
        cfg: &FineTuneConfig,
    ) -> Result<()> {
        let mismatch = |what: &str, a: String, b: String| {
            Err(Error::ArtifactMismatch(format!(
                "{what}: artifacts have {a}, run uses {b}"
            )))
        };
        if self.denoiser != frozen.name() {
            return mismatch("denoiser", self.denoiser.clone(), frozen.name().to_string());
        }
        let frozen_sum = param_checksum(frozen.params());
        if self.frozen_checksum != frozen_sum {
            return mismatch(
                "frozen denoiser checksum",
                self.frozen_checksum.clone(),
                frozen_sum,
            );
        }
        if self.params.len() != frozen.params().len() {
            return mismatch(
                "parameter count",
                self.params.len().to_string(),
                frozen.params().len().to_string(),
            );
        }
        for (what, a, b) in [
            ("t_full", self.t_full, sched.t_full()),
            ("t0", self.t0, cfg.t0),
            ("s_inv", self.s_inv, cfg.s_inv),
            ("s_sam", self.s_sam, cfg.s_sam),
        ] {
            if a != b {
                return mismatch(what, a.to_string(), b.to_string());
            }
        }
        Ok(())
    }

    /// A copy of `frozen` carrying these parameters.
    pub fn instantiate(&self, frozen: &dyn Denoiser) -> Result<Box<dyn Denoiser>> {
        if self.params.len() != frozen.params().len() {
            return Err(Error::shape(frozen.params().len(), self.params.len()));
        }
        let mut d = frozen.clone_box();
        d.params_mut().copy_from_slice(&self.params);
        Ok(d)
    }
}

/// Losses recorded for one iteration.
struct Objective {
    total: Var,
    terms: BTreeMap<String, f64>,
    cosines: BTreeMap<String, f64>,
}

/// Inverts each image with the frozen denoiser.
pub fn compute_latents(
    images: &[ImageBuffer],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<Vec<ImageBuffer>> {
    par::try_map(images, |img| ddim_invert(img, denoiser, sched, ts))
}

fn sample_all(
    latents: &[ImageBuffer],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<Vec<ImageBuffer>> {
    par::try_map(latents, |l| ddim_sample(l, denoiser, sched, ts))
}

#[allow(clippy::too_many_arguments)]
fn fine_tune<F>(
    stage: Stage,
    latents: &[ImageBuffer],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &FineTuneConfig,
    mut objective: F,
) -> Result<(Vec<f64>, Vec<LogRecord>)>
where
    F: FnMut(&mut Tape, Var, usize) -> Result<Objective>,
{
    let ts_sam = cfg.sampling_steps(sched)?;
    let lr = cfg.lr_schedule()?;
    let tag = cfg.experiment_tag();
    let mut params = denoiser.params().to_vec();
    let mut adam = Adam::new(params.len());
    let mut log = Vec::with_capacity(cfg.epochs * latents.len());
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        for (i, latent) in latents.iter().enumerate() {
            let mut tape = Tape::new();
            let p = tape.var(params.clone());
            let z = tape.constant(latent.as_slice().to_vec());
            let out = sample_on_tape(&mut tape, z, denoiser, p, latent.shape(), sched, &ts_sam)?;
            let obj = objective(&mut tape, out, i)?;
            let total = tape.scalar(obj.total);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { iter });
            }
            let grads = tape.backward(obj.total).wrt(p, params.len());
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { iter });
            }
            let rate = lr.lr_at(iter);
            adam.step(&mut params, &grads, rate)?;
            log::debug!("{stage:?} epoch {epoch} iter {iter} image {i}: total {total:.6}");
            log.push(LogRecord {
                stage,
                tag: tag.clone(),
                epoch,
                iter,
                image: i,
                lr: rate,
                total,
                terms: obj.terms,
                cosines: obj.cosines,
            });
            iter += 1;
        }
    }
    Ok((params, log))
}

/// Encoders used by makeup removal.
#[derive(Clone, Copy)]
pub struct RemovalModels<'a> {
    pub encoders: &'a JointEncoders,
    pub identity: &'a dyn FaceEmbedder,
    pub perceptual: &'a dyn PerceptualExtractor,
}

#[derive(Debug, Clone)]
pub struct RemovalArtifacts {
    pub tuned: TunedModel,
    pub latents: Vec<ImageBuffer>,
    /// Makeup-free reconstruction `ŷ` per reference.
    pub clean: Vec<ImageBuffer>,
    /// `E_I(y) − E_I(ŷ)` per reference.
    pub directions: Vec<Embedding>,
    pub log: Vec<LogRecord>,
}

/// Stage 1: fine-tunes a copy of `denoiser` so sampling from each
/// reference's latent removes its makeup.
pub fn run_makeup_removal(
    refs: &[ImageBuffer],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    models: RemovalModels<'_>,
    cfg: &FineTuneConfig,
) -> Result<RemovalArtifacts> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument(
            "makeup removal needs at least one reference".into(),
        ));
    }
    if cfg.prompt_clean.trim().is_empty() || cfg.prompt_makeup.trim().is_empty() {
        return Err(Error::InvalidArgument("both prompts must be set".into()));
    }
    cfg.validate(sched)?;
    let shape = refs[0].shape();
    for r in refs {
        r.ensure_same_shape(&refs[0])?;
        r.ensure_finite("reference image")?;
    }
    let ts_inv = cfg.inversion_steps(sched)?;
    let latents = compute_latents(refs, denoiser, sched, &ts_inv)?;

    let enc = models.encoders.image();
    let delta_text = text_direction(models.encoders, &cfg.prompt_clean, &cfg.prompt_makeup)?;
    let ref_embeds = par::try_map(refs, |r| enc.embed_image(r))?;
    let ref_ids = par::try_map(refs, |r| models.identity.face_embed(r))?;
    let w = cfg.weights;

    let (params, log) = fine_tune(
        Stage::Removal,
        &latents,
        denoiser,
        sched,
        cfg,
        |tape, out, i| {
            let dt = tape.constant(delta_text.as_slice().to_vec());
            let e_hat = enc.embed_on_tape(tape, out, shape)?;
            let e_y = tape.constant(ref_embeds[i].as_slice().to_vec());
            let delta = tape.sub(e_hat, e_y);
            let removal = graph::direction_loss(tape, delta, dt, TRAINING_GUARD)?;

            let id_hat = models.identity.embed_on_tape(tape, out, shape)?;
            let id_y = tape.constant(ref_ids[i].as_slice().to_vec());
            let identity = graph::identity_loss(tape, id_hat, id_y, TRAINING_GUARD)?;

            let y = tape.constant(refs[i].as_slice().to_vec());
            let fa = models.perceptual.features_on_tape(tape, out, shape)?;
            let fb = models.perceptual.features_on_tape(tape, y, shape)?;
            let lpips = graph::perceptual_distance(tape, &fa, &fb)?;

            let total = graph::weighted_sum(
                tape,
                &[
                    (removal, w.removal),
                    (identity, w.identity),
                    (lpips, w.lpips),
                ],
            );
            Ok(Objective {
                total,
                terms: BTreeMap::from([
                    ("removal".into(), tape.scalar(removal)),
                    ("identity".into(), tape.scalar(identity)),
                    ("lpips".into(), tape.scalar(lpips)),
                ]),
                cosines: BTreeMap::new(),
            })
        },
    )?;

    let tuned = TunedModel {
        params,
        ..TunedModel::untuned(denoiser, sched, cfg)
    };
    let tuned_den = tuned.instantiate(denoiser)?;
    let clean = sample_all(
        &latents,
        tuned_den.as_ref(),
        sched,
        &cfg.sampling_steps(sched)?,
    )?;
    let directions = refs
        .iter()
        .zip(&clean)
        .map(|(y, y_hat)| crate::losses::reference_direction(enc, y, y_hat))
        .collect::<Result<Vec<_>>>()?;
    Ok(RemovalArtifacts {
        tuned,
        latents,
        clean,
        directions,
        log,
    })
}

/// A makeup reference paired with its makeup-free version.
#[derive(Debug, Clone)]
pub struct ReferenceStyle {
    pub image: ImageBuffer,
    pub clean: ImageBuffer,
    pub masks: RegionMasks,
    /// `E_I(y) − E_I(ŷ)`.
    pub direction: Embedding,
}

impl ReferenceStyle {
    pub fn new(
        image: ImageBuffer,
        clean: ImageBuffer,
        masks: RegionMasks,
        enc: &dyn ImageEncoder,
    ) -> Result<Self> {
        image.ensure_same_shape(&clean)?;
        masks.ensure_matches(&image)?;
        let direction = crate::losses::reference_direction(enc, &image, &clean)?;
        if direction.norm() == 0.0 {
            return Err(Error::DegenerateDirection("reference makeup direction"));
        }
        Ok(Self {
            image,
            clean,
            masks,
            direction,
        })
    }
}

/// Encoders used by adversarial transfer.
#[derive(Clone, Copy)]
pub struct TransferModels<'a> {
    pub image_encoder: &'a dyn ImageEncoder,
    pub ensemble: &'a [Arc<dyn FaceEmbedder>],
    pub perceptual: &'a dyn PerceptualExtractor,
}

#[derive(Debug, Clone)]
pub struct TransferArtifacts {
    pub tag: String,
    pub tuned: TunedModel,
    pub latents: Vec<ImageBuffer>,
    /// Protected image `x'` per source.
    pub protected: Vec<ImageBuffer>,
    /// `cos(E_I(x') − E_I(x), E_I(y) − E_I(ŷ))` per source.
    pub direction_cosines: Vec<f64>,
    /// Per source, per ensemble member: `cos(m_k(x'), m_k(x*))`.
    pub target_cosines: Vec<BTreeMap<String, f64>>,
    pub log: Vec<LogRecord>,
}

/// Stage 2: fine-tunes a copy of `denoiser` so that samples from each
/// source's latent carry the reference makeup and embed close to `target`
/// under every ensemble member.
#[allow(clippy::too_many_arguments)]
pub fn run_adversarial_transfer(
    sources: &[ImageBuffer],
    masks: &[RegionMasks],
    reference: &ReferenceStyle,
    target: &ImageBuffer,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    models: TransferModels<'_>,
    cfg: &FineTuneConfig,
) -> Result<TransferArtifacts> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument(
            "adversarial transfer needs at least one source".into(),
        ));
    }
    if models.ensemble.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one face embedder".into(),
        ));
    }
    if masks.len() != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "missing masks: {} sources but {} mask maps",
            sources.len(),
            masks.len()
        )));
    }
    cfg.validate(sched)?;
    let shape = sources[0].shape();
    for (s, m) in sources.iter().zip(masks) {
        s.ensure_same_shape(&sources[0])?;
        s.ensure_finite("source image")?;
        m.ensure_matches(s)?;
    }
    target.ensure_same_shape(&sources[0])?;
    reference.image.ensure_same_shape(&sources[0])?;

    let ts_inv = cfg.inversion_steps(sched)?;
    let latents = compute_latents(sources, denoiser, sched, &ts_inv)?;
    let enc = models.image_encoder;
    let src_embeds = par::try_map(sources, |s| enc.embed_image(s))?;
    let target_embeds = par::try_map(models.ensemble, |m| m.face_embed(target))?;
    let w = cfg.weights;

    let (params, log) = fine_tune(
        Stage::Transfer,
        &latents,
        denoiser,
        sched,
        cfg,
        |tape, out, i| {
            let e_out = enc.embed_on_tape(tape, out, shape)?;
            let e_x = tape.constant(src_embeds[i].as_slice().to_vec());
            let delta = tape.sub(e_out, e_x);
            let dref = tape.constant(reference.direction.as_slice().to_vec());
            let direction = graph::direction_loss(tape, delta, dref, TRAINING_GUARD)?;

            let current = ImageBuffer::new(shape, tape.value(out).to_vec())?;
            let hm = hm_image(&current, &reference.image, &masks[i], &reference.masks)?;
            let pixel = graph::pixel_makeup_loss(tape, out, hm.image.as_slice(), &hm.matched);

            let mut embs = Vec::with_capacity(models.ensemble.len());
            let mut targets = Vec::with_capacity(models.ensemble.len());
            for (m, t) in models.ensemble.iter().zip(&target_embeds) {
                embs.push(m.embed_on_tape(tape, out, shape)?);
                targets.push(tape.constant(t.as_slice().to_vec()));
            }
            let (adversarial, cos) = graph::ensemble_attack(tape, &embs, &targets, TRAINING_GUARD)?;

            let x = tape.constant(sources[i].as_slice().to_vec());
            let visual = graph::visual_loss(tape, out, x, models.perceptual, shape, w.l1)?;

            let makeup = tape.lin_comb(direction, w.direction, pixel, w.pixel);
            let total = graph::weighted_sum(
                tape,
                &[
                    (makeup, w.makeup),
                    (adversarial, w.adversarial),
                    (visual, w.visual),
                ],
            );
            Ok(Objective {
                total,
                terms: BTreeMap::from([
                    ("direction".into(), tape.scalar(direction)),
                    ("pixel".into(), tape.scalar(pixel)),
                    ("makeup".into(), tape.scalar(makeup)),
                    ("adversarial".into(), tape.scalar(adversarial)),
                    ("visual".into(), tape.scalar(visual)),
                ]),
                cosines: models
                    .ensemble
                    .iter()
                    .zip(cos)
                    .map(|(m, c)| (m.name().to_string(), c))
                    .collect(),
            })
        },
    )?;

    let tuned = TunedModel {
        params,
        ..TunedModel::untuned(denoiser, sched, cfg)
    };
    let tuned_den = tuned.instantiate(denoiser)?;
    let mut protected = sample_all(
        &latents,
        tuned_den.as_ref(),
        sched,
        &cfg.sampling_steps(sched)?,
    )?;
    for p in &mut protected {
        p.clamp_unit();
    }
    let direction_cosines = protected
        .iter()
        .zip(&src_embeds)
        .map(|(p, e)| {
            let d = enc.embed_image(p)?.minus(e)?;
            Ok(d.cosine(&reference.direction).unwrap_or(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let target_cosines = protected
        .iter()
        .map(|p| {
            models
                .ensemble
                .iter()
                .zip(&target_embeds)
                .map(|(m, t)| {
                    Ok((
                        m.name().to_string(),
                        m.face_embed(p)?.cosine(t).unwrap_or(0.0),
                    ))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferArtifacts {
        tag: cfg.experiment_tag(),
        tuned,
        latents,
        protected,
        direction_cosines,
        target_cosines,
        log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protected {
    pub image: ImageBuffer,
    /// Entries that fell outside `[-1, 1]` before clamping.
    pub clamped: usize,
}

/// Inverts `x` with the frozen denoiser and samples with the tuned one.
pub fn protect(
    x: &ImageBuffer,
    frozen: &dyn Denoiser,
    sched: &NoiseSchedule,
    tuned: &TunedModel,
    cfg: &FineTuneConfig,
) -> Result<Protected> {
    tuned.ensure_compatible(frozen, sched, cfg)?;
    let latent = ddim_invert(x, frozen, sched, &cfg.inversion_steps(sched)?)?;
    let den = tuned.instantiate(frozen)?;
    let mut image = ddim_sample(&latent, den.as_ref(), sched, &cfg.sampling_steps(sched)?)?;
    let clamped = image.clamp_unit();
    if clamped > 0 {
        log::info!("protect: clamped {clamped} entries to [-1, 1]");
    }
    Ok(Protected { image, clamped })
}
