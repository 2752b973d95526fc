//! Dense double-precision tensors with tape-based reverse-mode
//! differentiation, plus the checkpoint container.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{check_param_set, finite_diff_check, relative_error, GradCheckOptions};
pub use graph::{transducer_forward_backward, AttnMask, Graph, Var, LOG_FLOOR};
pub use params::{Bound, ParamId, ParamSet, FORMAT_VERSION, MAGIC};
pub use tensor::Tensor;
