//! Dense kernels: matrix arithmetic, column orthonormalization, thin SVD.

mod matrix;
mod qr;
mod svd;

pub use matrix::{frobenius_norm, Matrix};
pub use qr::{orthonormal_extension, qr_orthonormalize};
pub use svd::{svd, SvdResult};
