//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! optimizer, learning-rate schedule and checkpoint format used for training.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod schedule;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepReport};
pub use error::{Result, TensorError};
pub use graph::{dropout_mask, Graph, Var};
pub use params::ParamStore;
pub use schedule::LrSchedule;
pub use tensor::{numel, Tensor};
