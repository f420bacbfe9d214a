//! Deep spiking Q-networks built from binary, symmetric-ternary and
//! asymmetric-ternary LIF neurons, with surrogate-gradient BPTT training and
//! numerical tools for studying their spike statistics and gradients.

pub mod rng;
pub mod tensor;
pub mod neuron;
pub mod encoding;
pub mod env;
pub mod network;
pub mod checkpoint;
pub mod rl;
pub mod analysis;

pub use rng::Rng;
pub use tensor::{Scalar, Tensor, TensorError};
