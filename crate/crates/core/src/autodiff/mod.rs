//! Dense 64-bit tensors, a tape-based reverse-mode differentiation graph,
//! Adam, parameter initializers and the binary checkpoint format.

mod adam;
mod checkpoint;
mod conv;
mod gemm;
mod graph;
mod init;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use conv::conv_output_len;
pub use graph::{Graph, Var};
pub use init::{gaussian, glorot_uniform};
pub use tensor::Tensor;
