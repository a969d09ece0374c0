//! Dense arrays with a reverse-mode differentiation tape.
//!
//! [`Graph`] is eager: each op computes its value when called and records
//! the inputs needed by the reverse sweep. Parameters live in a
//! [`ParamStore`] and are bound into a graph by id, so one store can back
//! many graphs (one per step, or one per evaluation worker).
//!
//! Broadcasting is limited to a right operand whose trailing axes match the
//! left operand or are 1. The max, segment-max and top-k ops send their
//! gradient to the first maximal element.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, primitive_suite, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use tensor::{argmax, dot, l2_normalize, log_softmax, softmax, top_k_indices, Tensor};
