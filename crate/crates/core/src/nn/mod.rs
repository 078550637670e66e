//! Tensors, reverse-mode differentiation, and the score networks built on them.

pub mod adam;
pub mod embedding;
pub mod gradcheck;
pub mod network;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use embedding::time_embedding;
pub use network::{Architecture, MlpConfig, NetOutput, Network, NetworkScore, UNetConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
