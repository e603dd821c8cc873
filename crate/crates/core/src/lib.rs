//! Gaussian mixture particle approximation of the one-dimensional nonlinear
//! filtering problem, together with exact and brute-force reference filters and
//! Monte Carlo studies of the approximation error.
//!
//! The main entry points are [`filter::run_filter`] for a single filter run,
//! [`oracles::kalman_bucy`] and [`oracles::bootstrap_oracle`] for ground truth,
//! and [`experiments::run_convergence_study`] / [`experiments::run_clt_study`]
//! for the rate and fluctuation studies.

pub mod error;
pub mod error_analysis;
pub mod experiments;
pub mod filter;
pub mod gaussmix;
mod hermite;
pub mod models;
pub mod oracles;
pub mod paths;

pub use error::{Error, Result};
pub use filter::{FilterConfig, FilterState, FilterTrajectory, Particle, Recording};
pub use gaussmix::{GaussianMeasure, WeightedMixture};
pub use models::{Model, TestFunction};
pub use paths::{ObservationPath, RngStream, SignalPath, TimeGrid};
