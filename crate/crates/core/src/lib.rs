//! Desk-scale federated-learning security testbed: hierarchical homomorphic
//! aggregation, escrowed model inspection and timestamp-based incentives.

pub mod config;
pub mod demo;
pub mod envelope;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod ham;
pub mod he;
pub mod imtti;
pub mod macm;
pub mod seed;
pub mod shamir;
pub mod tsa;

pub use config::{ExperimentConfig, SweepPreset};
pub use error::{Error, Result};
pub use experiment::{run_experiment, MetricsBundle, Simulation};
