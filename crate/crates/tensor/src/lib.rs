//! Dense CPU tensors with a tape-based reverse-mode autodiff.
//!
//! The op set is deliberately narrow: it covers exactly what the vision
//! encoder, the Q-Formers, the toy decoder and the heatmap head need, with
//! fused kernels (attention, layer norm, losses) to keep a single CPU core
//! busy with GEMMs rather than bookkeeping.

mod float;
mod graph;
mod ops;
mod tensor;

pub use float::{gemm, Float, MatView};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::sigmoid;
pub use tensor::Tensor;
