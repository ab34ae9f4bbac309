//! Dense 2-D tensors, a recording tape for reverse-mode differentiation, and
//! the handful of layers the communication agents are built from.
//!
//! Everything runs in `f64` on the CPU. Rows are the batch axis throughout;
//! grouped operations (attention, pooling, pairwise scores) treat consecutive
//! blocks of `group` rows as one independent set.

pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::NeuralError;
pub use layers::{Activation, LayerNorm, Linear, Mlp, SelfAttentionBlock};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tape::{EdgeState, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NeuralError>;
