//! Dense arrays, reverse-mode differentiation, Adam, checkpoints and a
//! finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, relative_error, CoordinateCheck, GradcheckConfig, GradcheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{sinusoidal_table, trunc_normal, xavier_uniform, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;
