//! Minimal reverse-mode automatic differentiation over `(N, C, D, H, W)` tensors.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod pointwise;
pub mod spatial;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, warmup_lr, AdamConfig, AdamState};
pub use pointwise::{Binary, Reduction, Unary};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
