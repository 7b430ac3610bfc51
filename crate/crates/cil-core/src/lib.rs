//! Class-incremental learning on a frozen transformer backbone.
//!
//! The toolkit trains one low-rank bottleneck adapter per task while keeping
//! the shared encoder frozen, pushes adapters toward mutual orthogonality so
//! they occupy complementary subspaces, fuses all task adapters into a single
//! universal adapter by per-coordinate sign consensus, and classifies with an
//! entropy-routed ensemble of the universal adapter and the most confident
//! task adapter. A synthetic-stream harness reproduces the incremental
//! protocol end to end: staged training, feature replay for classifier
//! calibration, per-stage evaluation, ablations, checkpoints, and reports.
//!
//! Everything is deterministic given a seed: the only randomness source is
//! the crate's own PRNG, numeric containers are ordered, and execution is
//! single threaded, so identical configurations produce byte-identical
//! outputs across runs and platforms.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod inference;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
