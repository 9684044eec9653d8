//! Simulator for multi-worker-selection distributed swarm learning over a
//! parameter-server network.
//!
//! Workers hold label-skewed shards, train with a hybrid particle-swarm /
//! gradient update, and are selected for upload by a score that blends
//! their evaluation loss with a normalized non-i.i.d. degree of their data.
//! FedAvg, single-best-worker DSL and loss-only multi-worker DSL are
//! provided as baselines.

pub mod analysis;
pub mod data;
pub mod model;
pub mod noniid;
pub mod orchestrator;
pub mod selection;
pub mod swarm;

pub use data::{Dataset, LabelHistogram, PartitionSpec, Sample};
pub use model::{ModelArch, ParamVector};
pub use orchestrator::{run_experiment, Algorithm, Experiment, ExperimentConfig, TrainingTrace};
