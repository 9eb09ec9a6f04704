//! Small denoisers for desk-scale runs and tests.

use std::sync::Arc;

use crate::ddim::Denoiser;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageShape};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};

fn check_params(tape: &Tape, params: Var, expected: usize) -> Result<()> {
    if tape.dim(params) != expected {
        return Err(Error::shape(
            format!("{expected} parameters"),
            format!("{} parameters", tape.dim(params)),
        ));
    }
    Ok(())
}

/// `ε ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn name(&self) -> &str {
        "zero"
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn eps_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        _t: usize,
        _params: Var,
        _shape: ImageShape,
    ) -> Result<Var> {
        Ok(tape.scale(x, 0.0))
    }

    fn clone_box(&self) -> Box<dyn Denoiser> {
        Box::new(*self)
    }
}

/// `ε ≡ c` with `c` the single parameter.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    params: [f64; 1],
}

impl ConstantDenoiser {
    pub fn new(value: f64) -> Self {
        Self { params: [value] }
    }
}

impl Denoiser for ConstantDenoiser {
    fn name(&self) -> &str {
        "constant"
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eps_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        _t: usize,
        params: Var,
        _shape: ImageShape,
    ) -> Result<Var> {
        check_params(tape, params, 1)?;
        let zero = tape.scale(x, 0.0);
        let ones = tape.offset(zero, 1.0);
        Ok(tape.mul_scalar(ones, params))
    }

    fn clone_box(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}

/// `ε(x) = a·tanh(x) + b`, a two-parameter nonlinear model.
#[derive(Debug, Clone)]
pub struct TanhAffineDenoiser {
    params: [f64; 2],
}

impl TanhAffineDenoiser {
    pub fn new(gain: f64, shift: f64) -> Self {
        Self {
            params: [gain, shift],
        }
    }
}

impl Denoiser for TanhAffineDenoiser {
    fn name(&self) -> &str {
        "tanh-affine"
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eps_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        _t: usize,
        params: Var,
        _shape: ImageShape,
    ) -> Result<Var> {
        check_params(tape, params, 2)?;
        let gain = tape.slice(params, 0, 1);
        let shift = tape.slice(params, 1, 1);
        let th = tape.tanh(x);
        let scaled = tape.mul_scalar(th, gain);
        let zero = tape.scale(x, 0.0);
        let ones = tape.offset(zero, 1.0);
        let offset = tape.mul_scalar(ones, shift);
        Ok(tape.add(scaled, offset))
    }

    fn clone_box(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}

/// Posterior-mean noise predictor for a per-pixel Gaussian image model.
///
/// With data modelled as `x0 ~ N(μ, diag(σ²))`, the minimizer of the
/// noise-prediction objective is
/// `ε(x_t, t) = √(1−ᾱ_t)·(x_t − √ᾱ_t·μ) / (ᾱ_t·σ² + 1 − ᾱ_t)`.
/// A learned offset `√(1−ᾱ_t)·b` (zero after fitting) is added on top.
///
/// Parameters are laid out as `[μ | log σ² | b]`, each one image long.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    shape: ImageShape,
    schedule: Arc<NoiseSchedule>,
    params: Vec<f64>,
}

impl GaussianDenoiser {
    /// Moment-matches `μ` and `σ²` to `images`; variances below `var_floor`
    /// are raised to it.
    pub fn fit(
        images: &[ImageBuffer],
        schedule: Arc<NoiseSchedule>,
        var_floor: f64,
    ) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit a denoiser to zero images".into()))?;
        let shape = first.shape();
        for img in images {
            img.ensure_same_shape(first)?;
            img.ensure_finite("denoiser training image")?;
        }
        let n = shape.len();
        let count = images.len() as f64;
        let mut mean = vec![0.0; n];
        for img in images {
            for (m, v) in mean.iter_mut().zip(img.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for img in images {
            for ((s, v), m) in var.iter_mut().zip(img.as_slice()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let log_var = var
            .into_iter()
            .map(|s| (s / count).max(var_floor).ln())
            .collect::<Vec<_>>();
        let mut params = mean;
        params.extend(log_var);
        params.extend(std::iter::repeat_n(0.0, n));
        Ok(Self {
            shape,
            schedule,
            params,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.schedule
    }

    /// Rebuilds a denoiser from a stored parameter vector.
    pub fn from_params(
        shape: ImageShape,
        schedule: Arc<NoiseSchedule>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if params.len() != 3 * shape.len() {
            return Err(Error::shape(3 * shape.len(), params.len()));
        }
        Ok(Self {
            shape,
            schedule,
            params,
        })
    }
}

impl Denoiser for GaussianDenoiser {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eps_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        t: usize,
        params: Var,
        shape: ImageShape,
    ) -> Result<Var> {
        if shape != self.shape {
            return Err(Error::shape(self.shape, shape));
        }
        let n = shape.len();
        check_params(tape, params, 3 * n)?;
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let noise_scale = (1.0 - ab).sqrt();

        let mean = tape.slice(params, 0, n);
        let log_var = tape.slice(params, n, n);
        let bias = tape.slice(params, 2 * n, n);

        let var = tape.exp(log_var);
        let scaled_var = tape.scale(var, ab);
        let denom = tape.offset(scaled_var, 1.0 - ab);
        let inv = tape.recip(denom);
        let centered = tape.lin_comb(x, 1.0, mean, -ab.sqrt());
        let posterior = tape.mul(inv, centered);
        Ok(tape.lin_comb(posterior, noise_scale, bias, noise_scale))
    }

    fn clone_box(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}
