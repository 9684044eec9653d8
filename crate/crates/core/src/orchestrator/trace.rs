use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ParamVector;

use super::{ExperimentConfig, OrchestratorError};

/// Scalars moved over the network, per round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    /// worker -> server
    pub uploads: Vec<u64>,
    /// server -> workers
    pub broadcasts: Vec<u64>,
}

impl CommLedger {
    pub fn push(&mut self, upload: u64, broadcast: u64) {
        self.uploads.push(upload);
        self.broadcasts.push(broadcast);
    }

    pub fn total_uploads(&self) -> u64 {
        self.uploads.iter().sum()
    }

    pub fn total_broadcasts(&self) -> u64 {
        self.broadcasts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker: usize,
    /// Evaluation loss of the new local model.
    pub f: f64,
    pub theta: f64,
    pub eta: f64,
    pub selected: bool,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub lr: f64,
    /// Whether the worker's loss rose between its last two rounds.
    pub local_loss_rose: bool,
    /// Squared norm of the local-objective gradient at the new local model.
    pub grad_norm_sq: f64,
    /// Norm of this round's local displacement.
    pub v_norm: f64,
    /// Cosine between the local displacement and the negative gradient.
    pub cos_local: Option<f64>,
    /// Norm of the global velocity w_t - w_{t-1} seen this round.
    pub global_v_norm: f64,
    pub cos_global: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    pub global_acc: f64,
    pub num_selected: usize,
    pub comm_upload: u64,
    pub comm_broadcast: u64,
    pub fallback: bool,
    pub threshold: Option<f64>,
    /// Whether the global loss fell between the two rounds before this one.
    pub global_loss_fell: bool,
    pub workers: Vec<WorkerRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub wall_clock_secs: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub config: ExperimentConfig,
    pub num_params: usize,
    /// Evaluation loss of the initial global model.
    pub initial_loss: f64,
    pub rounds: Vec<RoundRecord>,
    pub ledger: CommLedger,
    pub final_params: ParamVector,
    #[serde(default)]
    pub meta: RunMetadata,
}

pub const TRACE_CSV_HEADER: &str = "round,global_loss,global_acc,num_selected,comm_upload,fallback";

impl TrainingTrace {
    /// Per-round CSV with a fixed column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rounds {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                r.global_loss,
                r.global_acc,
                r.num_selected,
                r.comm_upload,
                u8::from(r.fallback)
            )
            .unwrap();
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.global_acc)
    }

    pub fn fallback_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.fallback).count()
    }

    pub fn write_json(&self, path: &Path) -> Result<(), OrchestratorError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| OrchestratorError::Schema(e.to_string()))?;
        fs::write(path, text).map_err(|e| OrchestratorError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(|e| OrchestratorError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Schema(format!("{}: {e}", path.display())))
    }
}
