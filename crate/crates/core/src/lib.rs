//! Stochastic anchoring for graph neural networks.
//!
//! The crate covers the whole pipeline: synthetic graph benchmarks with
//! controlled distribution shift ([`graph`]), a small reverse-mode
//! differentiation engine ([`autodiff`]), GCN/GIN models ([`model`]),
//! anchored training and K-anchor inference ([`anchoring`]), evaluation
//! metrics ([`metrics`]), post-hoc calibration ([`posthoc`]) and the
//! experiment runner behind the `gduq` binary ([`experiment`]).

pub mod anchoring;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod posthoc;
pub mod rng;

pub use error::{Error, Result};
