//! Sampling-based model predictive control with learned per-step sampling
//! distributions.
//!
//! The crate provides conventional multi-step MPPI, a deterministic
//! differentiable-predictive-control (DPC) policy, and Step-MPPI: a neural
//! policy emits a Gaussian `N(μ, L Lᵀ)` at every step, one MPPI weighted
//! update turns that distribution into a control, and training
//! backpropagates through the update in closed form.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for training and verification.

pub mod cost;
pub mod env;
pub mod error;
pub mod eval;
pub mod layer;
pub mod mppi;
pub mod numerics;
pub mod policy;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector64 = numerics::Vector<f64>;
pub type Matrix64 = numerics::Matrix<f64>;
pub type Cholesky64 = numerics::CholeskyFactor<f64>;
pub type Vector32 = numerics::Vector<f32>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Cholesky32 = numerics::CholeskyFactor<f32>;
