//! Dense tensors, a small fully-connected network with a shared extractor
//! and two kinds of heads, and the optimizer pieces needed to train it.

mod network;
mod optim;
mod tensor;

pub use network::{ActivationCache, Dense, Forward, Gradients, Network, ParamSet, PROB_EPS};
pub use optim::{cosine_lr, Sgd};
pub use tensor::Tensor2;
