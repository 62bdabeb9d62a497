//! Data-driven bi-level optimization toolkit.
//!
//! The pipeline: ingest tabular operating data ([`dataset`]), fit shallow
//! feed-forward surrogates with closed-form input derivatives ([`surrogate`]),
//! pose bi-level problems over analytic expressions or surrogates
//! ([`problem`], [`expr`]), collapse the lower level into KKT constraints with
//! optional Fischer-Burmeister smoothing and Mahalanobis validity envelopes
//! ([`reformulate`]), and solve the resulting single-level NLP with a
//! multistart augmented-Lagrangian solver ([`nlpsolver`]). [`plantopt`] and
//! [`robust`] build the power-plant style harnesses on top: tolerance sweeps
//! of the validity envelope and stability-radius robust optimization.

pub mod dataset;
pub mod error;
pub mod expr;
pub mod nlpsolver;
pub mod plantopt;
pub mod problem;
pub mod reformulate;
pub mod robust;
pub mod surrogate;

pub use error::{Error, Result};
