//! Deterministic DDIM sampling and inversion over an abstract denoiser.
//!
//! Every update uses the `σ = 0` rule
//! `x_{t'} = √ᾱ_{t'}·f(x_t, t) + √(1−ᾱ_{t'})·ε(x_t, t)` with
//! `f(x_t, t) = (x_t − √(1−ᾱ_t)·ε(x_t, t)) / √ᾱ_t`, walking down in `t` for
//! sampling and up for inversion.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageShape};
use crate::schedule::{NoiseSchedule, TimestepSequence};
use crate::tape::{Tape, Var};

/// A noise-prediction model `ε_θ(x_t, t)` with a flat parameter vector.
///
/// Implementations express their forward pass on a [`Tape`] so gradients can
/// flow both to the input image and to the parameter node the caller passes
/// in. The output must have the same length as the input.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Records `ε(x, t)` on `tape`. `params` must hold `self.params().len()`
    /// entries; it may be a constant or a differentiable leaf.
    fn eps_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        t: usize,
        params: Var,
        shape: ImageShape,
    ) -> Result<Var>;

    fn clone_box(&self) -> Box<dyn Denoiser>;

    fn predict_eps(&self, x: &ImageBuffer, t: usize) -> Result<ImageBuffer> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.as_slice().to_vec());
        let pv = tape.constant(self.params().to_vec());
        let out = self.eps_on_tape(&mut tape, xv, t, pv, x.shape())?;
        ImageBuffer::new(x.shape(), tape.value(out).to_vec())
    }
}

impl Clone for Box<dyn Denoiser> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Hex SHA-256 over the little-endian bytes of a parameter vector.
pub fn param_checksum(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    a.ensure_same_shape(b)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(
    x0: &ImageBuffer,
    t: usize,
    eps: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_same(x0, eps)?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| a * x + b * e)
        .collect();
    ImageBuffer::new(x0.shape(), data)
}

/// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    x_t: &ImageBuffer,
    t: usize,
    eps_pred: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_same(x_t, eps_pred)?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_pred.as_slice())
        .map(|(x, e)| (x - b * e) / a)
        .collect();
    ImageBuffer::new(x_t.shape(), data)
}

/// Records one deterministic DDIM move from `t` to `t_next` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn step_on_tape(
    tape: &mut Tape,
    x: Var,
    t: usize,
    t_next: usize,
    denoiser: &dyn Denoiser,
    params: Var,
    shape: ImageShape,
    sched: &NoiseSchedule,
) -> Result<Var> {
    if t == t_next {
        return Err(Error::InvalidArgument(format!(
            "ddim step needs distinct timesteps, got {t} -> {t_next}"
        )));
    }
    sched.check_t(t)?;
    sched.check_t(t_next)?;
    let eps = denoiser.eps_on_tape(tape, x, t, params, shape)?;
    if tape.dim(eps) != shape.len() {
        return Err(Error::shape(shape.len(), tape.dim(eps)));
    }
    let (ab_t, ab_n) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
    // f(x_t, t)
    let x0 = tape.lin_comb(
        x,
        1.0 / ab_t.sqrt(),
        eps,
        -(1.0 - ab_t).sqrt() / ab_t.sqrt(),
    );
    Ok(tape.lin_comb(x0, ab_n.sqrt(), eps, (1.0 - ab_n).sqrt()))
}

/// Walks `pairs` on `tape` starting from `x`.
#[allow(clippy::too_many_arguments)]
fn walk_on_tape(
    tape: &mut Tape,
    x: Var,
    pairs: &[(usize, usize)],
    denoiser: &dyn Denoiser,
    params: Var,
    shape: ImageShape,
    sched: &NoiseSchedule,
) -> Result<Var> {
    pairs.iter().try_fold(x, |cur, &(t, t_next)| {
        step_on_tape(tape, cur, t, t_next, denoiser, params, shape, sched)
    })
}

/// Records inversion `x0 -> x_{t0}` through `ts` on `tape`.
pub fn invert_on_tape(
    tape: &mut Tape,
    x0: Var,
    denoiser: &dyn Denoiser,
    params: Var,
    shape: ImageShape,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<Var> {
    walk_on_tape(
        tape,
        x0,
        &ts.ascending_pairs(),
        denoiser,
        params,
        shape,
        sched,
    )
}

/// Records sampling `x_{t0} -> x0` through `ts` on `tape`.
///
/// This is the fine-tuning path: with `params` a differentiable leaf, the
/// backward sweep yields exact gradients through every sampling step.
pub fn sample_on_tape(
    tape: &mut Tape,
    latent: Var,
    denoiser: &dyn Denoiser,
    params: Var,
    shape: ImageShape,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<Var> {
    walk_on_tape(
        tape,
        latent,
        &ts.descending_pairs(),
        denoiser,
        params,
        shape,
        sched,
    )
}

fn run_plain(
    x: &ImageBuffer,
    denoiser: &dyn Denoiser,
    pairs: &[(usize, usize)],
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    x.ensure_finite("ddim input")?;
    let mut cur = x.clone();
    // One short tape per step keeps memory flat for long walks.
    for &(t, t_next) in pairs {
        let mut tape = Tape::new();
        let xv = tape.constant(cur.as_slice().to_vec());
        let pv = tape.constant(denoiser.params().to_vec());
        let out = step_on_tape(&mut tape, xv, t, t_next, denoiser, pv, x.shape(), sched)?;
        cur = ImageBuffer::new(x.shape(), tape.value(out).to_vec())?;
    }
    Ok(cur)
}

pub fn ddim_step(
    x_t: &ImageBuffer,
    t: usize,
    t_next: usize,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    run_plain(x_t, denoiser, &[(t, t_next)], sched)
}

/// Deterministic inversion of `x0` to the latent at `ts.t0()`.
pub fn ddim_invert(
    x0: &ImageBuffer,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<ImageBuffer> {
    run_plain(x0, denoiser, &ts.ascending_pairs(), sched)
}

/// Deterministic generation from a latent at `ts.t0()` down to `x0`.
pub fn ddim_sample(
    latent: &ImageBuffer,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    ts: &TimestepSequence,
) -> Result<ImageBuffer> {
    run_plain(latent, denoiser, &ts.descending_pairs(), sched)
}

/// Inverts then samples, each with its own discretization.
pub fn round_trip(
    x0: &ImageBuffer,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    ts_inv: &TimestepSequence,
    ts_sam: &TimestepSequence,
) -> Result<ImageBuffer> {
    let latent = ddim_invert(x0, denoiser, sched, ts_inv)?;
    ddim_sample(&latent, denoiser, sched, ts_sam)
}
