//! Stable TransformerXL agents with adaptive attention spans, trained by a
//! V-trace actor-learner on small partially observable environments.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
