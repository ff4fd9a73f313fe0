//! Extended stochastic gradient Langevin dynamics (eSGLD) for Bayesian
//! variable selection in linear and logistic regression.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_model;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod gradients;
pub mod inference_metrics;
pub mod missing_data;
pub mod model_sampler;
pub mod rng;
pub mod synth_io;

pub use data_model::{Dataset, Family, MiniBatch, ModelIndicator, PriorSpec, ThetaState};
pub use driver::{ChainOutput, DriverConfig, Schedule};
pub use error::{Error, Result};
pub use rng::{RngStream, Stream};
