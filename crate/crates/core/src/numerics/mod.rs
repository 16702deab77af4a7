//! Dense tensors, reverse-mode differentiation, layers and optimization.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{dropout_mask, log_sum_exp, sigmoid, Gradients, Graph, Var};
pub use layers::{
    gaussian_log_density, gaussian_sample, kl_to_standard_normal, padded_ids, Gru, Linear, PaddedBatch,
};
pub use optim::OptimizerState;
pub use params::{Bound, ParameterSet};
pub(crate) use params::hex;
pub use params::sha256_hex;
pub use tensor::Tensor;
