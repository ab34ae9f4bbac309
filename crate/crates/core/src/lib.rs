//! Multi-agent reinforcement learning with a graph-attention communication
//! protocol used as a representation learner.

pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod envs;
mod error;
pub mod harness;
pub mod iwol;
pub mod rollout;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Algo, EnvKind, GlobalConfig, RunConfig};
pub use error::{IwolError, Result};
pub use trainer::{train, Trainer};
