//! Attribution of generated images to training data by unlearning.
//!
//! The crate trains a small class-conditional DDPM, unlearns a synthesized
//! image with a Fisher-preconditioned ascent step, and scores every training
//! image by how much its loss rises. Attributions are checked by retraining
//! from scratch without the top-K images.

pub mod attribution;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod hashing;
pub mod rng;
pub mod stats;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};
