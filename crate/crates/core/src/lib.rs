//! Asynchronous federated optimisation with learned quadratic Bezier
//! aggregation paths.
//!
//! Clients fit a curve in parameter space anchored at the global model they
//! were dispatched with; the server corrects the stale curve against the
//! global drift and steps part-way along it. The crate also carries the
//! position/tangent baselines, a deterministic event-driven scheduler and
//! the evaluation metrics used to compare them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod correction;
pub mod curve;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sim;
pub mod update;

pub use error::{Error, Result};
pub use params::ParamVector;
