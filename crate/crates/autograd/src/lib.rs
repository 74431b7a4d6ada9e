//! Minimal CPU autodiff for convolutional models.
//!
//! Tensors are dense row-major arrays; image tensors are NCHW. A [`Graph`]
//! records operations eagerly and differentiates them in one reverse pass.
//! Convolutions lower to GEMM through im2col. Batch-level work fans out over
//! rayon when the `parallel` feature is on (the default).

pub mod conv;
pub mod error;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod tensor;

pub use conv::ConvGeometry;
pub use error::{Result, TensorError};
pub use graph::{BatchStats, CustomOp, Gradients, Graph, NodeId, NormStats, Reduction};
pub use nn::{BatchNorm2d, Bound, Conv2d, Linear, Mode, Param, ParamId, ParamKind, ParamSet};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
