//! Federated few-shot text classification simulator.
//!
//! The crate covers the whole pipeline: a labeled-data generator that skews
//! a small labeled budget across clients, a from-scratch toy masked language
//! model, pattern-verbalizer prompting, FedAvg training rounds and
//! confidence-filtered pseudo-label augmentation.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix the two
//! supported precisions.

pub mod augmentor;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod partitioner;
pub mod prompt;
pub mod rng;
pub mod scalar;
mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Parameters in single precision, used for experiment runs.
pub type Params32 = model::ModelParams<f32>;
/// Parameters in double precision, used for gradient and exactness checks.
pub type Params64 = model::ModelParams<f64>;
