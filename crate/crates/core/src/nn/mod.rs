//! Network building blocks expressed as tape operations.

pub mod layout;
pub mod ops;

pub use layout::{
    cyclic_shift, from_tokens, stripe_partition, stripe_reverse, to_tokens, window_partition,
    window_partition_rect, window_reverse, window_reverse_rect, Orientation,
};
pub use ops::{avg_pool, conv2d, gelu, layer_norm, layer_norm_channels, linear, softmax, ConvSpec};
