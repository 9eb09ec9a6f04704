//! Protective adversarial makeup for face images via deterministic DDIM
//! fine-tuning, with the metrics used to evaluate it.
//!
//! Learned components sit behind the [`ddim::Denoiser`] and
//! [`encoders`] traits; the crate ships small seeded models so every stage
//! runs at desk scale.

pub mod ddim;
pub mod denoisers;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod linear;
pub mod losses;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod regions;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod toydata;

pub use error::{Error, Result};
pub use image::{ImageBuffer, ImageShape};
