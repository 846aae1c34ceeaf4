//! Dense numeric kernel: matrices, accounted ops, seeded RNG and the
//! two-layer MLP used by both classifiers.

pub mod grad;
mod matrix;
pub mod mlp;
pub mod ops;
mod rng;

pub use matrix::Matrix;
pub use mlp::{Mlp2, Mlp2Grads};
pub use ops::FlopCounter;
pub use rng::{derive_seed, Rng};
