//! Desk-scale laboratory for entropy-maximization unlearning in
//! class-conditional denoising diffusion models.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod harness;
pub mod stats;
pub mod unlearn;

pub use error::{Error, Result};

/// Random stream used everywhere in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
