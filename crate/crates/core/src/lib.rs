//! Numerical solver and stochastic verifier for the nonlocal ergodic
//! Hamilton-Jacobi-Bellman problem
//!
//!   (-Delta)^s u + H(x, Du) = f - lambda   in R^d,  s in (1/2, 1).
//!
//! The critical pair (u, lambda*) is computed by vanishing discount over
//! truncated discounted problems, bracketed by sub/supersolution
//! certificates, and cross-checked as the optimal long-run cost of a
//! controlled 2s-stable process.

pub mod config;
pub mod ergodic;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod levy;
pub mod operator;
pub mod par;
pub mod problem;
pub mod quad;
pub mod verifier;

pub use error::{Error, Result};
