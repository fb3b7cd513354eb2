//! Backbone assembly: stem, four stages of unified blocks, and the head.

pub mod block;
pub mod config;
pub mod model;

pub use block::{post_convolution, Block, BlockConfig, Ctx, Icmlp};
pub use config::{Mode, Toggles, VariantConfig};
pub use model::{build_variant, Downsample, Head, Model, Stage, Stem, INPUT_MULTIPLE};
