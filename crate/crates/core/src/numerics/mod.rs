//! Dense linear algebra, probability primitives, the cross-attention block
//! and the finite-difference gradient harness.

pub mod attention;
pub mod gradcheck;
pub mod matrix;
pub mod ops;

pub use attention::{mhca, FfnWeights, MhcaWeights};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheck};
pub use matrix::Matrix;
pub use ops::{cosine_sim, entropy, softmax, ProbVector};
