//! Desk-scale training of one-step diffusion-GAN generators.
//!
//! The generator `G(x_t, t)` is trained with a self-cooperative adversarial
//! objective, where the discriminator's "real" samples are the generator's
//! own stop-gradient outputs from a less corrupted input, regularised by
//! reconstruction and consistency losses whose weights anneal to zero.

pub mod ablation;
pub mod adaptation;
pub mod annealing;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod parameterizations;
pub mod params;
pub mod prior_init;
pub mod report;
pub mod schedulers;
pub mod trainer;
pub mod weight_algebra;

pub use error::{Error, Result};
