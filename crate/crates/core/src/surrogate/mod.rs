//! Gaussian-process surrogate of the log-joint and Bayesian quadrature.

pub mod bq;
pub mod gp;
pub mod optim;

pub use bq::{bq_expected_log_joint, BqEstimate};
pub use gp::{gp_fit, GpFitOptions, GpHypers, GpModel};
