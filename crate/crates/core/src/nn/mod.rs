//! Dense numerics with a recorded graph for reverse-mode gradients.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GRAD_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::{log_softmax, softmax_rows_inplace, Tensor};
