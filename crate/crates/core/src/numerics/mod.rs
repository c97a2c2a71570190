//! Deterministic dense numerics: tensors, MLPs with manual backprop,
//! first-order optimizers, k-means and the seeded RNG.

pub mod gradcheck;
mod kmeans;
mod loss;
mod mlp;
mod optim;
mod rng;
mod tensor;

pub use kmeans::{kmeans, KMeansResult};
pub use loss::{one_hot, softmax_cross_entropy};
pub(crate) use loss::cross_entropy_unchecked;
pub use mlp::{softmax, Activation, ForwardPass, Gradients, MlpModel, TopGrad};
pub use optim::{adam_step, optimizer_step, OptimState, OptimizerKind};
pub use rng::{derive_seed, SeededRng};
pub use tensor::{argmax, axpy, dot, squared_distance, Tensor};
