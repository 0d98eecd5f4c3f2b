//! Predictive coding as variational inference under a hierarchical Gaussian
//! generative model.
//!
//! | module        | contents                                                     |
//! |---------------|--------------------------------------------------------------|
//! | [`model`]     | network state, free energy, inference and EM learning        |
//! | [`training`]  | clamping modes, classification, generation                   |
//! | [`kalman`]    | linear state-space filtering and its gradient-based solution |
//! | [`precision`] | covariance dynamics and Fisher-information checks            |
//! | [`graph`]     | predictive coding on arbitrary computation graphs            |
//! | [`relaxed`]   | backward weights, dropped derivatives, learned connectivity  |
//! | [`dynamics`]  | generalised coordinates, action, PID equivalence             |
//! | [`data`]      | IDX files and synthetic data                                 |
//! | [`experiment`]| configuration, metrics and experiment runners                |

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod activation;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod numdiff;
pub mod precision;
pub mod relaxed;
pub mod training;

pub use activation::Activation;
pub use error::{PcError, Result};
pub use linalg::{Matrix, Precision, Vector};
