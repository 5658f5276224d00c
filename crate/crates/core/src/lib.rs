//! Adaptive personalized federated learning for robot fleets.
//!
//! The crate simulates a fleet of clients that share model parameters (never
//! raw data) with an aggregating server. Besides plain federated averaging it
//! implements a personalization pass whose per-group learning rates are
//! proportional to how much each parameter group varies across clients.
//!
//! Modules:
//! - [`params`]: parameter vectors, Adam, cross-client statistics, checkpoints
//! - [`autodiff`]: tape-based reverse-mode differentiation
//! - [`fl`]: the training schemes (Local, Cloud, SFL, SPFL, APFL)
//! - [`lqr`]: point-mass regulator task with a Riccati oracle
//! - [`forecast`]: recurrent conditional VAE forecasting human controls
//! - [`sim`]: 2D driving simulator, synthetic drivers and the MPC planner
//! - [`bench`]: experiments, statistics and exports

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod fl;
pub mod forecast;
pub mod lqr;
pub mod params;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
