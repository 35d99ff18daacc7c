//! Deformable image registration: a frozen backbone proposes a field, a gated
//! intensity normalizer handles contrast mismatch, and a cascade of small
//! U-Nets refines the field per pair by instance optimization.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod field;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod scalar;
pub mod synth;
pub mod vol_io;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Volume32 = volume::Volume<f32>;
pub type Volume64 = volume::Volume<f64>;
pub type Field32 = field::DisplacementField<f32>;
pub type Field64 = field::DisplacementField<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Cascade32 = refine::RefineCascade<f32>;
pub type Cascade64 = refine::RefineCascade<f64>;
