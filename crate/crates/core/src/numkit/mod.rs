//! Numeric foundation: tensors, deterministic RNG, autodiff tape, Adam.

pub mod adam;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use rng::{derive_seed, splitmix64, Rng};
pub use tape::{Grads, Tape, Var};
pub use tensor::{channel_concat, lin_comb, mse, slice_channels, Tensor, TensorError};
