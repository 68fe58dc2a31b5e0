//! Convolutional bottleneck adapters ("TUNA") for frozen Swin-style
//! segmentation backbones, on top of a small f64 autodiff core.

pub mod error;
pub mod adapter;
pub mod backbone;
pub mod config;
pub mod data;
pub mod forward;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// The single random generator type threaded through initialisation,
/// dropout and data synthesis.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
