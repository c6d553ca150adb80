//! Tensor, reverse-mode differentiation, losses and optimizers.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};
pub use graph::{ConvGeometry, Graph, Var};
pub use optim::{MultiStepLr, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{gemm, Real, Tensor};
