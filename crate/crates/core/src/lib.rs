//! Stability-gated online influence estimation.
//!
//! A small set of anchor directions carries streaming inverse-Hessian-vector
//! products that are refined a few iterations per training step; each anchor
//! is gated by a confidence weight computed from its residual and a cheap
//! stability proxy, and per-example influence scores are aggregated over
//! the anchors.

pub mod anchors;
pub mod curvature;
pub mod data;
pub mod error;
pub mod harness;
pub mod ihvp;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scorer;
pub mod snapshot;
pub mod stability;

pub use error::{Result, SgoifError};
