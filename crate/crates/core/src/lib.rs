//! Deterministic single-process simulator of federated unsupervised
//! representation learning.
//!
//! Clients train a small two-view self-supervised encoder whose uniformity
//! regularizer is an l2-penalized unbalanced optimal transport divergence
//! between batch embeddings and spherical-Gaussian anchor samples. The server
//! aggregates either by sample-weighted averaging (FedAvg) or by balancing
//! client model-deviation change rates through a simplex-constrained dual QP
//! solved with ADMM. Everything is driven by seeded, splittable random
//! streams so a run is a pure function of its config.

pub mod aggregator;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod numerics;
pub mod oracles;
pub mod ssl;
pub mod uot;

pub use config::Config;
pub use error::SimError;
pub use numerics::{Mat, RngStream};
