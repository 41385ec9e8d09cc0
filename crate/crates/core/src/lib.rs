//! CIM-aware CNN adaptation: width morphing under macro bitline budgets,
//! weight and partial-sum quantization-aware training, macro mapping with
//! hardware metrics, and a bit-exact integer CIM simulator.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod mapper;
pub mod model;
pub mod morph;
pub mod pipeline;
pub mod qat;
pub mod sim;
pub mod tensor;
pub mod train;

pub use config::{channels_per_bitline, clip_bounds, ClipBounds, MacroConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic RNG used by every stochastic component.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
