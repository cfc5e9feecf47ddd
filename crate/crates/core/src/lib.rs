//! dodkit-core: research toolkit for studying model hijacking through
//! distilled synthetic datasets.
//!
//! The pipeline: generate osmosis samples with a dual-encoder Transporter,
//! distill them into a small synthetic set (key-patch mosaics, soft labels,
//! trajectory matching), fine-tune victim models on the result, and measure
//! attack success, utility, and detectability.

pub mod artifacts;
pub mod datasets;
pub mod defense;
pub mod distiller;
pub mod error;
pub mod experiments;
pub mod hijack;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod transporter;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default element type for the training pipeline.
pub type Elem = f32;

use rand_chacha::ChaCha8Rng;

/// The crate-wide seeded RNG. Every stage derives its own stream from a
/// (seed, stream label) pair so stages stay decoupled.
pub fn rng_for(seed: u64, stream: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
