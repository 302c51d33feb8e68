//! Dense linear algebra, seeded random streams, Gaussian sampling helpers and
//! the finite-difference oracle.

pub mod fd;
pub mod gaussian;
pub mod linalg;
pub mod rng;

pub use fd::{finite_diff_gradient, finite_diff_jacobian, rel_err};
pub use gaussian::{entropy_grad_l, gaussian_entropy, reparam_sample, softmax_neg_scaled};
pub use linalg::{tri_index, tri_len, CholeskyFactor, Matrix, Vector, DIAG_FLOOR};
pub use rng::{KeyedStream, RngStream};
