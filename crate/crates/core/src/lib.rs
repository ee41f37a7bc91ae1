//! Trajectory forecasting for heterogeneous agents that conditions on the
//! full per-agent class-probability vectors reported by perception.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod checkpoint;
pub mod counterfactual;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
