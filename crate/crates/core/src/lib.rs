//! Adaptive distributed kernel ridge regression with a Lepskii-type stopping
//! rule.
//!
//! Agents fit kernel ridge regression along a ladder `lambda_k = 1/(k b)`,
//! approximate successive differences of their estimates in a basis of shared
//! kernel centers, and upload only those coefficients. A coordinator averages
//! them into a global approximation which every agent then uses to pick its
//! own regularization parameter. Predictions combine the local models through
//! a double weighted average. No raw samples ever leave an agent.
//!
//! Modules:
//! - [`kernel`]: kernels and Gram matrices
//! - [`krr`]: ladder solves, effective dimension, W-quantity, constants
//! - [`approx`]: shared-center approximation, global synthesis, seminorms
//! - [`lepskii`]: the stopping rule and calibration of its constant
//! - [`protocol`]: the message-passing simulation with privacy audit
//! - [`datagen`]: synthetic problems with exact population error metrics
//! - [`experiment`]: configuration, single runs and sweeps

// `!(x > 0.0)` checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod krr;
pub mod lepskii;
pub mod points;
pub mod protocol;

pub use error::{Error, Result};
pub use points::Points;
