//! Unsupervised domain adaptation on a small reverse-mode autodiff tape.
//!
//! A feature extractor and classifier are trained on labeled source data
//! while a conditional domain discriminator (behind gradient reversal),
//! kernel MMD, pseudo-label weighted MMD, class-confusion and information
//! maximization terms pull the unlabeled target distribution into line.
//! Everything runs in `f64` on the CPU and is deterministic given a seed.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with
// non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Dense kernels index several buffers with the same loop variables.
#![allow(clippy::needless_range_loop)]

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod embed;
pub mod error;
pub mod kernel;
pub mod models;
pub mod rng;
pub mod target_losses;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
