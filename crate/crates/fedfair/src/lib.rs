//! Deterministic simulator of fair, asymptotically equal collaborative
//! learning: streaming-data nodes jointly train a convex model while a
//! coordinator first estimates per-node contributions until a Hotelling
//! stopping test fires, then realizes incentives by sampling nodes for model
//! synchronization with contribution-proportional probabilities, tracking
//! staleness, fairness, and equality metrics.

pub mod datagen;
pub mod error;
pub mod incentive;
pub mod learner;
pub mod metrics;
pub mod orchestrator;
pub mod rngs;
pub mod stopping;
pub mod valuation;

pub use error::{Error, Result};
