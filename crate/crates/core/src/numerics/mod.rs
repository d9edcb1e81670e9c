//! Dense tensors, tape-based reverse-mode autodiff, Adam, and the checkpoint
//! container every model in the crate is built on.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{log_sum_exp, sigmoid, softmax_in_place, softplus, Gradients, Graph, Var};
pub use layers::{Binder, SelfAttention, Trainable};
pub use params::ParamSet;
pub use tensor::Tensor;
