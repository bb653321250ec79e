//! Convolutional, normalization and linear building blocks.

pub mod conv;
pub mod layers;
pub mod norm;

pub use conv::{conv3d, conv3d_forward, conv_transpose3d, conv_transpose3d_forward, ConvGeometry};
pub use layers::{linear, BlockSpec, Conv, ConvTranspose, Linear, Norm, ResidualBlock, SeparableConv, NORM_EPS};
pub use norm::{instance_norm, layer_norm};
