//! Sub-mode conditioned flow matching on two-dimensional Gaussian mixtures.

pub mod dual;
pub mod error;
pub mod mixture;
pub mod net;
pub mod objectives;
pub mod rng;
pub mod clustering;
pub mod metrics;
pub mod sampler;

pub use error::{Error, Result};
