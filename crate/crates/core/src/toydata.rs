//! Seeded synthetic faces with region masks and parametric makeup.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::{ImageBuffer, ImageShape, CHANNELS};
use crate::pipeline::FineTuneConfig;
use crate::regions::{Region, RegionMasks};
use crate::rng::stream_rng;

/// Per-identity face geometry and appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTemplate {
    pub label: String,
    skin: [f64; 3],
    background: [f64; 3],
    center: (f64, f64),
    radii: (f64, f64),
    eye_row: f64,
    eye_gap: f64,
    lip_row: f64,
    lip_half_width: f64,
    /// Low-frequency texture: (amplitude, row freq, col freq, phase) per channel.
    waves: Vec<[f64; 4]>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl IdentityTemplate {
    pub fn new(seed: u64, index: usize) -> Self {
        let mut rng = stream_rng(seed, &format!("toydata/identity/{index}"));
        let tone = uniform(&mut rng, -0.1, 0.5);
        let skin = [
            tone + uniform(&mut rng, 0.05, 0.2),
            tone + uniform(&mut rng, -0.05, 0.05),
            tone - uniform(&mut rng, 0.05, 0.2),
        ];
        let background = [
            uniform(&mut rng, -0.8, -0.3),
            uniform(&mut rng, -0.8, -0.3),
            uniform(&mut rng, -0.8, -0.3),
        ];
        let waves = (0..CHANNELS * 2)
            .map(|_| {
                [
                    uniform(&mut rng, 0.03, 0.1),
                    uniform(&mut rng, 0.5, 3.0),
                    uniform(&mut rng, 0.5, 3.0),
                    uniform(&mut rng, 0.0, std::f64::consts::TAU),
                ]
            })
            .collect();
        Self {
            label: format!("id{index:03}"),
            skin,
            background,
            center: (uniform(&mut rng, 0.47, 0.53), uniform(&mut rng, 0.47, 0.53)),
            radii: (uniform(&mut rng, 0.36, 0.44), uniform(&mut rng, 0.28, 0.36)),
            eye_row: uniform(&mut rng, 0.36, 0.42),
            eye_gap: uniform(&mut rng, 0.13, 0.17),
            lip_row: uniform(&mut rng, 0.68, 0.74),
            lip_half_width: uniform(&mut rng, 0.08, 0.13),
            waves,
        }
    }

    fn region(&self, u: f64, v: f64) -> Region {
        let (cy, cx) = self.center;
        let (ry, rx) = self.radii;
        let inside = ((u - cy) / ry).powi(2) + ((v - cx) / rx).powi(2) <= 1.0;
        if !inside {
            return Region::Background;
        }
        let eye = (u - self.eye_row).abs() <= 0.04
            && ((v - (cx - self.eye_gap)).abs() <= 0.07 || (v - (cx + self.eye_gap)).abs() <= 0.07);
        if eye {
            return Region::Eyes;
        }
        if (u - self.lip_row).abs() <= 0.035 && (v - cx).abs() <= self.lip_half_width {
            return Region::Lips;
        }
        Region::Skin
    }

    /// Renders one instance; `shift` jitters the face by whole pixels.
    pub fn render(
        &self,
        shape: ImageShape,
        shift: (i32, i32),
        noise: &[f64],
    ) -> (ImageBuffer, RegionMasks) {
        let (h, w) = (shape.height as f64, shape.width as f64);
        let mut labels = Vec::with_capacity(shape.pixels());
        let mut img = ImageBuffer::zeros(shape);
        for r in 0..shape.height {
            for c in 0..shape.width {
                let u = (r as f64 - shift.0 as f64 + 0.5) / h;
                let v = (c as f64 - shift.1 as f64 + 0.5) / w;
                let region = self.region(u, v);
                labels.push(region as u8);
                for ch in 0..CHANNELS {
                    let base = match region {
                        Region::Background => self.background[ch] + 0.15 * (u - 0.5),
                        Region::Skin => self.skin[ch],
                        Region::Eyes => self.skin[ch] - 0.55,
                        Region::Lips => self.skin[ch] - 0.2 + if ch == 0 { 0.15 } else { -0.05 },
                    };
                    let texture: f64 = if region == Region::Background {
                        0.0
                    } else {
                        self.waves[ch * 2..ch * 2 + 2]
                            .iter()
                            .map(|[a, fr, fc, ph]| {
                                a * (std::f64::consts::TAU * (fr * u + fc * v) + ph).sin()
                            })
                            .sum()
                    };
                    let n = noise.get(img.index(r, c, ch)).copied().unwrap_or(0.0);
                    img.set(r, c, ch, (base + texture + n).clamp(-1.0, 1.0));
                }
            }
        }
        let masks =
            RegionMasks::new(shape.height, shape.width, labels).expect("labels come from Region");
        (img, masks)
    }
}

/// Colour offsets added inside makeup regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MakeupStyle {
    pub lips: [f64; 3],
    pub eyes: [f64; 3],
    pub skin: [f64; 3],
}

impl MakeupStyle {
    pub fn random(seed: u64, index: usize) -> Self {
        let mut rng = stream_rng(seed, &format!("toydata/style/{index}"));
        let mut pick = |lo: f64, hi: f64| {
            [
                uniform(&mut rng, lo, hi),
                uniform(&mut rng, lo, hi),
                uniform(&mut rng, lo, hi),
            ]
        };
        let mut lips = pick(-0.3, 0.3);
        lips[0] += 0.45;
        let eyes = pick(-0.4, 0.5);
        let skin = pick(-0.08, 0.12);
        Self { lips, eyes, skin }
    }

    pub fn apply(&self, img: &ImageBuffer, masks: &RegionMasks) -> ImageBuffer {
        let mut out = img.clone();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let delta = match masks.region_at(r, c) {
                    Region::Background => continue,
                    Region::Skin => self.skin,
                    Region::Lips => self.lips,
                    Region::Eyes => self.eyes,
                };
                for (ch, d) in delta.iter().enumerate() {
                    out.set(r, c, ch, (img.get(r, c, ch) + d).clamp(-1.0, 1.0));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFace {
    pub identity: String,
    pub image: ImageBuffer,
    pub masks: RegionMasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub height: usize,
    pub width: usize,
    pub identities: usize,
    pub per_identity: usize,
    /// Per-entry Gaussian noise standard deviation.
    pub noise: f64,
    /// Maximum pixel jitter in each direction.
    pub jitter: i32,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            identities: 6,
            per_identity: 3,
            noise: 0.02,
            jitter: 1,
        }
    }
}

impl ToyDataConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width)
    }
}

/// Clean faces, `per_identity` instances for each of `identities` people,
/// in identity-major order.
pub fn generate_faces(seed: u64, cfg: &ToyDataConfig) -> Vec<ToyFace> {
    let shape = cfg.shape();
    let mut out = Vec::with_capacity(cfg.identities * cfg.per_identity);
    for id in 0..cfg.identities {
        let template = IdentityTemplate::new(seed, id);
        for k in 0..cfg.per_identity {
            let mut rng = stream_rng(seed, &format!("toydata/instance/{id}/{k}"));
            let shift = if cfg.jitter > 0 {
                (
                    rng.random_range(-cfg.jitter..=cfg.jitter),
                    rng.random_range(-cfg.jitter..=cfg.jitter),
                )
            } else {
                (0, 0)
            };
            let noise: Vec<f64> = (0..shape.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.noise * z
                })
                .collect();
            let (image, masks) = template.render(shape, shift, &noise);
            out.push(ToyFace {
                identity: template.label.clone(),
                image,
                masks,
            });
        }
    }
    out
}

/// Learning-rate and weight presets that make the toy models train within a
/// few epochs. The library defaults target full-size models.
pub fn toy_removal_config() -> FineTuneConfig {
    FineTuneConfig {
        base_lr: 2e-3,
        ..FineTuneConfig::default()
    }
}

pub fn toy_transfer_config() -> FineTuneConfig {
    let mut cfg = FineTuneConfig {
        base_lr: 2e-2,
        ..FineTuneConfig::default()
    };
    cfg.weights.adversarial = 3.0;
    cfg
}

/// A complete desk-scale protection scenario.
#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub faces: Vec<ToyFace>,
    pub style: MakeupStyle,
    /// Made-up reference face.
    pub reference: ToyFace,
    pub target: ToyFace,
    pub sources: Vec<ToyFace>,
    /// Clean faces plus made-up copies, for fitting a denoiser.
    pub denoiser_training: Vec<ImageBuffer>,
}

impl ToyScenario {
    /// Six identities with three faces each; sources are the first face of
    /// identities 0 to 3, the target is identity 4 and the reference is
    /// identity 5 wearing style 0.
    pub fn new(seed: u64) -> Self {
        let cfg = ToyDataConfig::default();
        let faces = generate_faces(seed, &cfg);
        let style = MakeupStyle::random(seed, 0);
        let per = cfg.per_identity;
        let mut reference = faces[5 * per].clone();
        reference.image = style.apply(&reference.image, &reference.masks);
        let mut denoiser_training: Vec<ImageBuffer> =
            faces.iter().map(|f| f.image.clone()).collect();
        for (i, f) in faces.iter().enumerate() {
            denoiser_training.push(MakeupStyle::random(seed, i % 3).apply(&f.image, &f.masks));
        }
        Self {
            sources: (0..4).map(|id| faces[id * per].clone()).collect(),
            target: faces[4 * per].clone(),
            reference,
            style,
            denoiser_training,
            faces,
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.reference.image.shape()
    }

    pub fn source_images(&self) -> Vec<ImageBuffer> {
        self.sources.iter().map(|f| f.image.clone()).collect()
    }

    pub fn source_masks(&self) -> Vec<RegionMasks> {
        self.sources.iter().map(|f| f.masks.clone()).collect()
    }
}
