//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod conv;
mod dense;
pub mod gradcheck;
mod linalg;
mod norm;
mod params;
mod pool;
mod softmax;
mod tape;

use rand::SeedableRng;

pub use dense::Tensor;
pub use linalg::sigmoid;
pub use norm::BatchStats;
pub use params::{he_uniform, orthogonal, BatchNormState, BufferId, BufferUpdates, ParamId, ParamStore, Session};
pub use tape::{Gradients, Mode, Tape, Var};

/// Seedable generator threaded explicitly through every stochastic step.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
