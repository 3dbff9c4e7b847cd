//! Fisher-Rao particle flows for Bayesian inference.
//!
//! The crate covers
//! - Gaussian and Gaussian-mixture parameterizations ([`gaussian`]),
//! - Gauss-Hermite rules and affine particle transport ([`quadrature`]),
//! - evaluable target models with analytic oracles ([`targets`]),
//! - exact Daum-Huang flow coefficients ([`edh`]),
//! - Gaussian and mixture Fisher-Rao flows ([`fr_gaussian`], [`fr_mixture`]),
//! - particle-flow driven normalizing flows ([`normflow`]),
//! - fixed and adaptive Runge-Kutta integration ([`integrator`]),
//! - KL / ELBO estimators on grids and particle sets ([`metrics`]).

pub mod edh;
pub mod error;
pub mod fr_gaussian;
pub mod fr_mixture;
pub mod gaussian;
pub mod integrator;
pub mod metrics;
pub mod normflow;
pub mod quadrature;
pub mod targets;

pub use error::{FlowError, Result};
