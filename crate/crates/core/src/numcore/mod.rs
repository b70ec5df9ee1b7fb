//! Dense tensor arithmetic and the reverse-mode differentiation tape that
//! every attention variant and the tiny transformer run on.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::{l1_normalize_rows, l2_normalize_rows, matmul, Tensor, NORM_EPS};
