//! Unsupervised anomaly detection, sensor localization and severity
//! estimation for multivariate sensor series.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndgrad`]: dense 2-D tensors, reverse-mode differentiation, Adam.
//! - [`statemat`]: temporal and spatial state matrices of a window.
//! - [`model`]: the three-branch attention transformer and its checkpoints.
//! - [`losses`]: association alignment and reconstruction objectives.
//! - [`diagnosis`]: anomaly scores, localization, severity, thresholds and
//!   point-adjusted evaluation.
//! - [`pipeline`]: CSV ingestion, synthetic coupled-tank data, training,
//!   detection runs, reports and the command line.

pub mod container;
pub mod diagnosis;
pub mod losses;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod ndgrad;
pub mod statemat;

pub use error::{Error, Result};
