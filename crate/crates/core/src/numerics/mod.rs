//! Dense linear algebra, neural primitives, SVD and seeded randomness.
//!
//! All math runs in `f64`. Nothing here allocates threads or global state;
//! an [`Rng`] belongs to a single owner.

mod linalg;
mod matrix;
mod ops;
mod rng;
mod svd;

pub use linalg::solve_spd;
pub use matrix::{axpy, dot, norm, Matrix};
pub use ops::{
    cosine_similarity_matrix, gelu, gelu_grad, layer_norm, layer_norm_backward, logsumexp,
    row_norms, sigmoid, softmax_inplace, softmax_rows, RowStats,
};
pub use rng::{Rng, RNG_ALGORITHM};
pub use svd::svd_values;
