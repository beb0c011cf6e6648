//! Minimal dense tensor core: `f32` tensors, a reverse-mode autodiff tape,
//! AdamW, seeded random streams and the `QFMCKPT1` checkpoint container.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use error::TensorError;
pub use optim::{adamw_step, AdamWConfig, AdamWState, OptimError};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
