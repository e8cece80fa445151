//! Dense tensors, reverse-mode autodiff, parameters, Adam and checkpoints.

mod adam;
mod checkpoint;
pub mod kernels;
mod param;
mod tape;
mod value;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{log_sigmoid, sigmoid, Gradients, ParamGrads, Tape, Var};
pub use value::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
