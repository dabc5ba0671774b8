//! Gradient-regularization laboratory for a two-layer convolutional network on
//! signal-noise data.
//!
//! The crate is organised bottom-up:
//!
//! - [`data_model`]: two-patch signal-noise datasets with noise exactly orthogonal
//!   to the signal direction, plus their text export format.
//! - [`network`]: the squared-ReLU CNN with a fixed `±1/m` output layer.
//! - [`gradient`]: logistic loss, per-example gradients, Hessian-vector products
//!   and exact objective gradients for standard, per-example (PEGR) and full (FGR)
//!   gradient regularization.
//! - [`gradcheck`]: central finite-difference validators for the above.
//! - [`decomposition`]: signal-noise coefficients `gamma`/`rho`, by direct
//!   least squares and by tracking the update recurrences.
//! - [`trainer`]: full-batch gradient descent with a regularize-then-cut-off
//!   schedule, producing per-epoch traces.
//! - [`metrics`]: signal/noise/test-error metrics and theory-side utilities.
//! - [`validation`]: the self-check battery behind `gradreg validate`.

pub mod data_model;
pub mod decomposition;
pub mod error;
pub mod gradcheck;
pub mod gradient;
pub mod metrics;
pub mod network;
pub mod trainer;
pub mod validation;

mod linalg;
mod seeds;

pub use error::{Error, Result};
pub use seeds::derive_seed;
