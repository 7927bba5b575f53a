//! Adaptive, nested, positive-weight quadrature for Bayesian prediction.
//!
//! Rules are built from samples of a nearest-neighbour posterior surrogate by
//! removing sample nodes along Vandermonde null vectors, keeping the sample
//! moments of a polynomial space intact while never introducing negative
//! weights. Each iteration reuses every node (and model evaluation) of the
//! previous rule.
//!
//! The numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

pub mod adaptive;
pub mod baselines;
pub mod basis;
pub mod bayes;
pub mod genz;
pub mod implicit;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod proposal;
pub mod rng;
pub mod rules;
pub mod scalar;

pub use basis::{BasisFamily, MultiIndex, MultiIndexBasis, PolynomialSpace};
pub use rules::{QuadratureRule, RuleError, RuleEstimate};
pub use scalar::Scalar;

/// A double-precision quadrature rule.
pub type Rule = QuadratureRule<f64>;
