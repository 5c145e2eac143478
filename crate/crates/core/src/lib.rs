//! Stacking of local variational posteriors.
//!
//! Independent local fits each return a Gaussian-mixture posterior together
//! with Bayesian-quadrature estimates of every component's expected log-joint.
//! Stacking concatenates the components of several fits and re-optimizes all
//! mixture weights against a global evidence lower bound, which merges
//! posteriors that each explored only part of the target.

pub mod debias;
pub mod error;
pub mod harness;
pub mod localfit;
pub mod metrics;
pub mod mixture;
pub mod numerics;
pub mod stacking;
pub mod surrogate;
pub mod targets;
pub mod transforms;

pub use error::{Error, Result};
pub use mixture::{GaussianComponent, GaussianMixture};
pub use targets::{GroundTruth, TargetProblem};
pub use transforms::ParamTransform;
