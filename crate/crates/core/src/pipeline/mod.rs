pub mod backbone;

pub use backbone::{backbone_predict, iterate_backbone, BackboneSpec, VariationalParams};
pub mod style;

pub use style::{apply_style, gated_preprocess, global_ncc, monotone_remap, Preprocessed, StyleTransferSpec};
pub mod optimize;

pub use optimize::{instance_optimize, IOConfig, IOInputs, IOResult, IOTrace, StepRecord};
pub mod pretrain;

pub use pretrain::{pair_loss, pretrain_refiners, PretrainConfig, PretrainRecord, TrainPair};
