//! Raw forward/backward kernels. The autodiff tape in [`crate::tape`] wires
//! these together; they are also usable directly for inference and oracles.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod gemm;
pub mod layout;
pub mod linear;
pub mod loss;
pub mod norm;

pub use activation::Activation;
pub use conv::{conv2d, conv2d_im2col, conv2d_reference, conv_out_extent, Conv2dGeom};
pub use linear::linear;
pub use norm::{batchnorm_eval, batchnorm_train, channel_layout, groupnorm, layernorm, BatchStats};
