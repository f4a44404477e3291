//! Dense tensors, convolution/normalization kernels and a small reverse-mode
//! autodiff tape.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use element::{lit, DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::finite_diff_check;
pub use kernels::{Activation, BatchStats, Conv2dGeom};
pub use optim::Sgd;
pub use param::{ParamId, ParamLeaf, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
