//! Learned feature extractors behind trait objects, plus seeded toy models.
//!
//! Real vision-language, face-recognition and perceptual networks plug in by
//! implementing these traits and registering a factory under a name in
//! [`EncoderRegistry`]. The toy models shipped here are fixed random
//! projections and convolutions; their outputs are reproducible from a seed
//! but carry no semantic calibration.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageShape, CHANNELS};
use crate::linear::{AvgPool, Conv2d, DenseMap, LinearMap};
use crate::rng::{derive_seed, stream_rng};
use crate::tape::{Tape, Var};

/// Fixed-dimension real vector produced by an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`.
    pub fn minus(&self, other: &Embedding) -> Result<Embedding> {
        if self.dim() != other.dim() {
            return Err(Error::shape(self.dim(), other.dim()));
        }
        Ok(Embedding(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> Option<f64> {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let (sa, sb) = (sq(&self.0), sq(&other.0));
        if sa == 0.0 || sb == 0.0 || self.dim() != other.dim() {
            return None;
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        // One square root of the product keeps cos(v, v) exactly 1.
        Some(dot / (sa * sb).sqrt())
    }
}

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_on_tape(&self, tape: &mut Tape, img: Var, shape: ImageShape) -> Result<Var>;

    fn embed_image(&self, img: &ImageBuffer) -> Result<Embedding> {
        embed_plain(img, |tape, v| self.embed_on_tape(tape, v, img.shape()))
    }
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

/// Identity-discriminative embedder; cosine similarity between two
/// embeddings is the verification score.
pub trait FaceEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_on_tape(&self, tape: &mut Tape, img: Var, shape: ImageShape) -> Result<Var>;

    fn face_embed(&self, img: &ImageBuffer) -> Result<Embedding> {
        embed_plain(img, |tape, v| self.embed_on_tape(tape, v, img.shape()))
    }
}

/// One feature map on a tape: `positions x channels`, channel-interleaved.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub positions: usize,
    pub channels: usize,
}

pub trait PerceptualExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features_on_tape(
        &self,
        tape: &mut Tape,
        img: Var,
        shape: ImageShape,
    ) -> Result<Vec<FeatureMap>>;
}

fn embed_plain(
    img: &ImageBuffer,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Embedding> {
    img.ensure_finite("encoder input")?;
    let mut tape = Tape::new();
    let v = tape.constant(img.as_slice().to_vec());
    let out = f(&mut tape, v)?;
    Embedding::new(tape.value(out).to_vec())
}

pub fn face_embed(emb: &dyn FaceEmbedder, img: &ImageBuffer) -> Result<Embedding> {
    emb.face_embed(img)
}

pub fn embed_image(enc: &dyn ImageEncoder, img: &ImageBuffer) -> Result<Embedding> {
    enc.embed_image(img)
}

pub fn embed_text(enc: &dyn TextEncoder, text: &str) -> Result<Embedding> {
    enc.embed_text(text)
}

/// An image encoder and a text encoder sharing one embedding space.
#[derive(Clone)]
pub struct JointEncoders {
    image: Arc<dyn ImageEncoder>,
    text: Arc<dyn TextEncoder>,
}

impl fmt::Debug for JointEncoders {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JointEncoders")
            .field("image", &self.image.name())
            .field("text", &self.text.name())
            .finish()
    }
}

impl JointEncoders {
    pub fn new(image: Arc<dyn ImageEncoder>, text: Arc<dyn TextEncoder>) -> Result<Self> {
        if image.dim() != text.dim() {
            return Err(Error::InvalidArgument(format!(
                "image encoder `{}` (dim {}) and text encoder `{}` (dim {}) do not share a space",
                image.name(),
                image.dim(),
                text.name(),
                text.dim()
            )));
        }
        Ok(Self { image, text })
    }

    pub fn image(&self) -> &dyn ImageEncoder {
        self.image.as_ref()
    }

    pub fn text(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect()
}

fn check_shape(expected: ImageShape, got: ImageShape) -> Result<()> {
    if expected != got {
        return Err(Error::shape(expected, got));
    }
    Ok(())
}

/// Flatten + fixed Gaussian projection, no bias.
#[derive(Debug, Clone)]
pub struct ToyLinearEncoder {
    name: String,
    shape: ImageShape,
    proj: Arc<DenseMap>,
}

impl ToyLinearEncoder {
    pub fn new(name: impl Into<String>, seed: u64, shape: ImageShape, dim: usize) -> Self {
        let n = shape.len();
        let mut rng = stream_rng(seed, "toy-linear");
        let w = gaussian_vec(&mut rng, dim * n, 1.0 / (n as f64).sqrt());
        Self {
            name: name.into(),
            shape,
            proj: Arc::new(DenseMap::new(dim, n, w)),
        }
    }

    pub fn projection(&self) -> &DenseMap {
        &self.proj
    }
}

impl ImageEncoder for ToyLinearEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.proj.rows()
    }

    fn embed_on_tape(&self, tape: &mut Tape, img: Var, shape: ImageShape) -> Result<Var> {
        check_shape(self.shape, shape)?;
        Ok(tape.linear(img, self.proj.clone()))
    }
}

/// Bag-of-tokens text encoder: each lowercase alphanumeric token hashes to
/// a seeded Gaussian vector; a string embeds to the sum over its tokens.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    name: String,
    seed: u64,
    dim: usize,
}

impl ToyTextEncoder {
    pub fn new(name: impl Into<String>, seed: u64, dim: usize) -> Self {
        Self {
            name: name.into(),
            seed,
            dim,
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, &format!("token/{token}"));
        gaussian_vec(&mut rng, self.dim, 1.0 / (self.dim as f64).sqrt())
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("text prompt is empty".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        Embedding::new(acc)
    }
}

/// Average-pool to a coarse grid, then an affine projection.
///
/// Members of one family share a common projection plus a member-specific
/// perturbation, so an attack against some members partially transfers to
/// the others.
#[derive(Debug, Clone)]
pub struct ToyFaceEmbedder {
    name: String,
    shape: ImageShape,
    pool: Arc<AvgPool>,
    proj: Arc<DenseMap>,
    bias: Vec<f64>,
}

/// Smallest common divisor of both sides that brings them to at most
/// `max_grid`.
fn pool_factor(shape: ImageShape, max_grid: usize) -> usize {
    (1..=shape.height.min(shape.width))
        .find(|f| {
            shape.height.is_multiple_of(*f)
                && shape.width.is_multiple_of(*f)
                && shape.height / f <= max_grid
                && shape.width / f <= max_grid
        })
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceFamilyConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Pooled grid side (upper bound).
    pub grid: usize,
    /// Weight of the member-specific projection relative to the shared one.
    pub specificity: f64,
    /// Standard deviation of the bias entries.
    pub bias_std: f64,
}

impl Default for FaceFamilyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            grid: 8,
            specificity: 0.75,
            bias_std: 0.1,
        }
    }
}

impl ToyFaceEmbedder {
    pub fn family_member(
        name: impl Into<String>,
        family_seed: u64,
        member: usize,
        shape: ImageShape,
        cfg: FaceFamilyConfig,
    ) -> Self {
        let factor = pool_factor(shape, cfg.grid);
        let pool = AvgPool::new(shape.height, shape.width, CHANNELS, factor);
        let n = pool.output_len();
        let std = 1.0 / (n as f64).sqrt();
        let shared = gaussian_vec(&mut stream_rng(family_seed, "shared"), cfg.dim * n, std);
        let mut rng = stream_rng(family_seed, &format!("member/{member}"));
        let specific = gaussian_vec(&mut rng, cfg.dim * n, std);
        let bias = gaussian_vec(&mut rng, cfg.dim, cfg.bias_std);
        let w = shared
            .iter()
            .zip(&specific)
            .map(|(s, p)| s + cfg.specificity * p)
            .collect();
        Self {
            name: name.into(),
            shape,
            pool: Arc::new(pool),
            proj: Arc::new(DenseMap::new(cfg.dim, n, w)),
            bias,
        }
    }

    pub fn pool(&self) -> &AvgPool {
        &self.pool
    }

    pub fn projection(&self) -> &DenseMap {
        &self.proj
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl FaceEmbedder for ToyFaceEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.proj.rows()
    }

    fn embed_on_tape(&self, tape: &mut Tape, img: Var, shape: ImageShape) -> Result<Var> {
        check_shape(self.shape, shape)?;
        let pooled = tape.linear(img, self.pool.clone());
        let projected = tape.linear(pooled, self.proj.clone());
        Ok(tape.add_const(projected, &self.bias))
    }
}

/// Two random 3x3 convolution stages with `tanh`, the second after a 2x2
/// average pool.
#[derive(Debug, Clone)]
pub struct ToyPerceptual {
    name: String,
    shape: ImageShape,
    conv1: Arc<Conv2d>,
    pool: Arc<AvgPool>,
    conv2: Arc<Conv2d>,
}

impl ToyPerceptual {
    pub const WIDTH: usize = 8;

    pub fn new(name: impl Into<String>, seed: u64, shape: ImageShape) -> Result<Self> {
        if !shape.height.is_multiple_of(2) || !shape.width.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "toy perceptual extractor needs even image sides, got {shape}"
            )));
        }
        let c = Self::WIDTH;
        let mut rng = stream_rng(seed, "toy-perceptual");
        let k1 = gaussian_vec(
            &mut rng,
            c * CHANNELS * 9,
            1.0 / ((CHANNELS * 9) as f64).sqrt(),
        );
        let k2 = gaussian_vec(&mut rng, c * c * 9, 1.0 / ((c * 9) as f64).sqrt());
        let (h, w) = (shape.height, shape.width);
        Ok(Self {
            name: name.into(),
            shape,
            conv1: Arc::new(Conv2d::new(h, w, CHANNELS, c, 3, k1)),
            pool: Arc::new(AvgPool::new(h, w, c, 2)),
            conv2: Arc::new(Conv2d::new(h / 2, w / 2, c, c, 3, k2)),
        })
    }
}

impl PerceptualExtractor for ToyPerceptual {
    fn name(&self) -> &str {
        &self.name
    }

    fn features_on_tape(
        &self,
        tape: &mut Tape,
        img: Var,
        shape: ImageShape,
    ) -> Result<Vec<FeatureMap>> {
        check_shape(self.shape, shape)?;
        let c = Self::WIDTH;
        let a1 = tape.linear(img, self.conv1.clone());
        let f1 = tape.tanh(a1);
        let p = tape.linear(f1, self.pool.clone());
        let a2 = tape.linear(p, self.conv2.clone());
        let f2 = tape.tanh(a2);
        Ok(vec![
            FeatureMap {
                var: f1,
                positions: shape.pixels(),
                channels: c,
            },
            FeatureMap {
                var: f2,
                positions: shape.pixels() / 4,
                channels: c,
            },
        ])
    }
}

type Factory<T> = Arc<dyn Fn(u64, ImageShape) -> Result<Arc<T>> + Send + Sync>;

/// Name-keyed constructors for every encoder kind.
///
/// Built-in names: `toy-linear-<dim>` (image), `toy-text-<dim>` (text),
/// `toy-face-<k>` (face embedder family member `k`), `toy-perceptual`.
/// Plug-ins registered under other names take precedence over built-ins.
#[derive(Clone)]
pub struct EncoderRegistry {
    seed: u64,
    shape: ImageShape,
    face_family: FaceFamilyConfig,
    image: HashMap<String, Factory<dyn ImageEncoder>>,
    text: HashMap<String, Factory<dyn TextEncoder>>,
    face: HashMap<String, Factory<dyn FaceEmbedder>>,
    perceptual: HashMap<String, Factory<dyn PerceptualExtractor>>,
}

impl fmt::Debug for EncoderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderRegistry")
            .field("seed", &self.seed)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

fn parse_suffix(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok().filter(|d| *d > 0)
}

impl EncoderRegistry {
    pub fn new(seed: u64, shape: ImageShape) -> Self {
        Self {
            seed,
            shape,
            face_family: FaceFamilyConfig::default(),
            image: HashMap::new(),
            text: HashMap::new(),
            face: HashMap::new(),
            perceptual: HashMap::new(),
        }
    }

    pub fn with_face_family(mut self, cfg: FaceFamilyConfig) -> Self {
        self.face_family = cfg;
        self
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn component_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, &format!("encoder/{name}"))
    }

    pub fn register_image_encoder(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(u64, ImageShape) -> Result<Arc<dyn ImageEncoder>> + Send + Sync + 'static,
    ) {
        self.image.insert(name.into(), Arc::new(f));
    }

    pub fn register_text_encoder(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(u64, ImageShape) -> Result<Arc<dyn TextEncoder>> + Send + Sync + 'static,
    ) {
        self.text.insert(name.into(), Arc::new(f));
    }

    pub fn register_face_embedder(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(u64, ImageShape) -> Result<Arc<dyn FaceEmbedder>> + Send + Sync + 'static,
    ) {
        self.face.insert(name.into(), Arc::new(f));
    }

    pub fn register_perceptual(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(u64, ImageShape) -> Result<Arc<dyn PerceptualExtractor>> + Send + Sync + 'static,
    ) {
        self.perceptual.insert(name.into(), Arc::new(f));
    }

    pub fn image_encoder(&self, name: &str) -> Result<Arc<dyn ImageEncoder>> {
        let seed = self.component_seed(name);
        if let Some(f) = self.image.get(name) {
            return f(seed, self.shape);
        }
        let dim = parse_suffix(name, "toy-linear-")
            .ok_or_else(|| Error::UnknownComponent(name.to_string()))?;
        Ok(Arc::new(ToyLinearEncoder::new(name, seed, self.shape, dim)))
    }

    pub fn text_encoder(&self, name: &str) -> Result<Arc<dyn TextEncoder>> {
        let seed = self.component_seed(name);
        if let Some(f) = self.text.get(name) {
            return f(seed, self.shape);
        }
        let dim = parse_suffix(name, "toy-text-")
            .ok_or_else(|| Error::UnknownComponent(name.to_string()))?;
        Ok(Arc::new(ToyTextEncoder::new(name, seed, dim)))
    }

    pub fn joint(&self, image: &str, text: &str) -> Result<JointEncoders> {
        JointEncoders::new(self.image_encoder(image)?, self.text_encoder(text)?)
    }

    pub fn face_embedder(&self, name: &str) -> Result<Arc<dyn FaceEmbedder>> {
        if let Some(f) = self.face.get(name) {
            return f(self.component_seed(name), self.shape);
        }
        let member = name
            .strip_prefix("toy-face-")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::UnknownComponent(name.to_string()))?;
        let family_seed = derive_seed(self.seed, "encoder/toy-face-family");
        Ok(Arc::new(ToyFaceEmbedder::family_member(
            name,
            family_seed,
            member,
            self.shape,
            self.face_family,
        )))
    }

    pub fn face_embedders(&self, names: &[String]) -> Result<Vec<Arc<dyn FaceEmbedder>>> {
        names.iter().map(|n| self.face_embedder(n)).collect()
    }

    pub fn perceptual(&self, name: &str) -> Result<Arc<dyn PerceptualExtractor>> {
        let seed = self.component_seed(name);
        if let Some(f) = self.perceptual.get(name) {
            return f(seed, self.shape);
        }
        if name != "toy-perceptual" {
            return Err(Error::UnknownComponent(name.to_string()));
        }
        Ok(Arc::new(ToyPerceptual::new(name, seed, self.shape)?))
    }
}
