//! Peer effects in import entry over a directed production network.
//!
//! The pipeline reads (or simulates) firm-to-firm links, firm attributes
//! and import statuses, builds the potential-starter panel, constructs peer
//! shares and their second-order instruments, absorbs high-dimensional
//! fixed effects and fits OLS or 2SLS with cluster-robust inference.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod dgp;
pub mod error;
pub mod estimator;
pub mod hdfe;
pub mod ledger;
pub mod montecarlo;
pub mod network;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod treatment;

pub use error::{Error, Result};
pub use estimator::EstimationResult;
pub use pipeline::{estimate, Dataset, Estimate, EstimateOptions};
pub use treatment::Spec;
