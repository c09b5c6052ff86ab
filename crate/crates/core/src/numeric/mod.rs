//! Dense tensors, reverse-mode differentiation and the Adam optimiser.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{softmax_rows, CrossEntropyOut, Gradients, Graph, Var};
pub use params::{cosine_lr, AdamConfig, ParameterStore};
pub use rng::RngStream;
pub use tensor::Tensor;
