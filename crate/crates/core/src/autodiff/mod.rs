//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader,
    ParamEntry, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::{normal, uniform_fan_in, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
