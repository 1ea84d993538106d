//! Desk-scale guided diffusion editing.
//!
//! A from-scratch implementation of drag-style image editing on top of
//! deterministic diffusion sampling: exact inversion with a memory bank,
//! energy-gradient guidance with regional masking, regional SDE stepping,
//! accurate time-travel rollback, and fused text/image-prompt conditioning.
//! Everything runs against closed-form mixture oracles instead of large
//! pretrained models, so the sampling math is testable to tight tolerances.

pub mod data;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod io;
pub mod oracle;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
