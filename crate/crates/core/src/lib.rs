//! Non-autoregressive sequence-to-sequence training with multi-granularity
//! metric-based optimization.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use tape::{AttentionBlock, AttentionLayout, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
