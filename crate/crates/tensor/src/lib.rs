//! Dense tensors, a reverse-mode autodiff tape, AdamW, and the named-tensor
//! container format shared by every model file in the workspace.

mod error;
mod float;
mod graph;
pub mod io;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, DType, Float};
pub use graph::{Graph, Var};
pub use io::{AnyTensor, NamedTensors};
pub use optim::{clip_grad_norm, AdamW};
pub use tensor::Tensor;
