//! Small reverse-mode autodiff engine over `f64` matrices.

mod graph;
mod optim;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{apply_gate, GradMap, Optimizer, OptimizerKind, OptimizerSettings, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{sigmoid, softmax_rows};
