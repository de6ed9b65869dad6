//! Rank-adaptive low-rank adapter training.
//!
//! The central type is [`LowRankAdapter`], an increment `U diag(S) Vᵀ` with
//! orthonormal bases. [`geolora::GeoLora`] advances a stack of adapters with
//! one gradient evaluation per iteration and adapts their ranks by truncating
//! an augmented factorization. [`baselines`] holds the methods it is compared
//! against and [`harness`] runs configured experiments and verification suites.

pub mod baselines;
pub mod error;
pub mod geolora;
pub mod harness;
pub mod linalg;
pub mod lowrank;
pub mod optim;
pub mod problems;
pub mod scalar;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
pub use lowrank::{AugmentedState, LowRankAdapter, TruncationMode, TruncationPolicy};
pub use scalar::Scalar;

pub type Mat = Matrix<f64>;
pub type Adapter = LowRankAdapter<f64>;
pub type Adapter32 = LowRankAdapter<f32>;
pub type Policy = TruncationPolicy<f64>;
