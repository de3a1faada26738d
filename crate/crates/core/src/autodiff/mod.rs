//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

pub mod gradcheck;
pub mod graph;
pub mod kernels;

pub use gradcheck::{finite_diff_gradcheck, relative_error, GradCheckReport, ParamError, Probe};
pub use graph::{focal_loss, Activation, BnParams, BnUpdate, Cell, Gradients, Graph, MergeMode, Mode, Var};
