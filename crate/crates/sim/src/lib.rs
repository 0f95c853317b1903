//! Simulation layer for federated deep-equilibrium learning: synthetic and CSV
//! data, by-label partitioning, multi-node orchestration with FeDEQ and FedAvg,
//! metrics files and the `fedeq` command-line tool.

pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod metrics;
pub mod run;
pub mod tools;

pub use error::{Result, SimError};
