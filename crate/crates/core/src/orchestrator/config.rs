use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{AlphaGroup, PartitionSpec};
use crate::noniid::DegreeCoefficients;
use crate::swarm::SwarmConfig;

use super::OrchestratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Multi-worker selection on the loss/heterogeneity trade-off score.
    Mdsl,
    /// Multi-worker selection on the loss alone (tau = 1).
    MultiDsl,
    /// Swarm updates with the single best worker uploading.
    VanillaDsl,
    FedAvg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mdsl => "mdsl",
            Algorithm::MultiDsl => "multi_dsl",
            Algorithm::VanillaDsl => "vanilla_dsl",
            Algorithm::FedAvg => "fed_avg",
        }
    }

    pub fn uses_swarm(self) -> bool {
        !matches!(self, Algorithm::FedAvg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        num_classes: usize,
        dim: usize,
        n: usize,
        separation: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

fn default_eval_size() -> usize {
    2048
}
fn default_test_size() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Size of the shared evaluation set D_g.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Held-out samples for accuracy, split off the source unless separate
    /// test files are given.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub eval_seed: u64,
}

/// Which data the training gradient is taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// The worker's own shard.
    #[default]
    Local,
    /// The shared evaluation set.
    Global,
}

/// Where the swarm terms enter the local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwarmGranularity {
    /// Once per round, on top of the local SGD displacement.
    #[default]
    Round,
    /// On every minibatch step.
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
}

fn default_tau() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    4
}
fn default_batch_size() -> usize {
    64
}
fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub swarm: SwarmConfig,
    #[serde(default)]
    pub degree: DegreeCoefficients,
    /// Feed 1 - eta into the trade-off score instead of eta.
    #[serde(default)]
    pub eta_complement: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Minibatches drawn per epoch; `None` makes each epoch a full pass.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// Seeds model initialization and minibatch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gradient_source: GradientSource,
    #[serde(default)]
    pub granularity: SwarmGranularity,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Select every worker every round (ablation switch).
    #[serde(default)]
    pub force_full_participation: bool,
}

impl ExperimentConfig {
    /// The desk-scale blob setup: 10 classes in 16 dimensions, a linear
    /// model, `workers` shards of 512 samples at concentration `alpha`.
    pub fn blobs(algorithm: Algorithm, workers: usize, alpha: f64, rounds: usize, seed: u64) -> Self {
        Self {
            algorithm,
            data: DataConfig {
                source: DataSource::Blobs {
                    num_classes: 10,
                    dim: 16,
                    n: 30_000,
                    separation: 4.0,
                    seed,
                },
                eval_size: default_eval_size(),
                test_size: default_test_size(),
                eval_seed: seed,
            },
            partition: PartitionSpec {
                groups: vec![AlphaGroup { workers, alpha }],
                shard_size: 512,
                seed,
                disjoint: false,
                iid: false,
            },
            model: ModelConfig::default(),
            swarm: SwarmConfig {
                seed,
                ..SwarmConfig::default()
            },
            degree: DegreeCoefficients::default(),
            eta_complement: false,
            tau: default_tau(),
            rounds,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            batches_per_epoch: None,
            seed,
            gradient_source: GradientSource::Local,
            granularity: SwarmGranularity::Round,
            parallelism: 1,
            force_full_participation: false,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let err = |field: &str, msg: String| {
            Err(OrchestratorError::Config {
                field: field.to_string(),
                message: msg,
            })
        };
        if self.rounds == 0 {
            return err("rounds", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if self.batches_per_epoch == Some(0) {
            return err("batches_per_epoch", "must be at least 1 when set".into());
        }
        if self.parallelism == 0 {
            return err("parallelism", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return err("tau", format!("must lie in [0, 1], got {}", self.tau));
        }
        if self.data.eval_size == 0 {
            return err("data.eval_size", "must be positive".into());
        }
        if let Err(e) = self.partition.validate() {
            return err("partition", e.to_string());
        }
        if let Err(e) = self.swarm.validate() {
            return err("swarm", e);
        }
        if self.model.hidden.contains(&0) {
            return err("model.hidden", "layer sizes must be positive".into());
        }
        let d = &self.degree;
        if ![d.beta1, d.beta2, d.phi].iter().all(|v| v.is_finite()) {
            return err("degree", "coefficients must be finite".into());
        }
        if let DataSource::Blobs { separation, .. } = self.data.source {
            if !separation.is_finite() || separation < 0.0 {
                return err("data.source.blobs.separation", format!("invalid value {separation}"));
            }
        }
        Ok(())
    }

    /// Tau actually used in the trade-off score.
    pub fn effective_tau(&self) -> f64 {
        match self.algorithm {
            Algorithm::Mdsl | Algorithm::FedAvg => self.tau,
            Algorithm::MultiDsl | Algorithm::VanillaDsl => 1.0,
        }
    }
}
