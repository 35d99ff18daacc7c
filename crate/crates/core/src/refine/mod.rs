pub mod cascade;
pub mod unet;

pub use cascade::{init_cascade, CascadeConfig, CascadeOutput, RefineCascade, ScaleMode, UpdateMode, Variant};
pub use unet::{ConvSpec, UNet3DConfig, UNetParams};
