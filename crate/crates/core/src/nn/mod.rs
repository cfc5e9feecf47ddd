//! Minimal neural-network stack: layers with hand-written backward passes,
//! losses, and optimizers. Everything is generic over [`crate::scalar::Scalar`].

pub mod conv;
pub mod init;
pub mod layers;
pub mod linear;
pub mod loss;
pub mod optim;
pub mod param;

pub use conv::Conv2d;
pub use layers::{AvgPool2, Relu, Sigmoid, Upsample2};
pub use linear::Linear;
pub use loss::{cross_entropy_logits, cross_entropy_probs, entropy, one_hot, softmax, softmax1};
pub use optim::{zero_grads, Adam, Sgd};
pub use param::{flatten_values, unflatten_values, Param};
mod checks;
