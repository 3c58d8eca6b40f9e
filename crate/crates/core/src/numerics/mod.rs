//! Dense tensors, reverse-mode differentiation, seeded randomness and
//! finite-difference gradient checking.

mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, ridders, Derivative, GradCheckReport, DEFAULT_EPS};
pub use graph::{logsumexp, sigmoid, Graph, Mode, Var};
pub use rng::Rng;
pub use tensor::{cross_entropy_logits, matmul, row_softmax, Tensor};
