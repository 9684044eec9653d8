//! Parameter-server round loop.
//!
//! Each round is barrier-synchronous: every worker starts from the broadcast
//! global model, trains locally, evaluates its new model on the shared set
//! D_g and reports a score; the server then selects uploaders, averages their
//! deltas into the global model and broadcasts it. Worker phases run on a
//! rayon pool, and all randomness is keyed on (seed, round, worker), so the
//! trace is identical for any degree of parallelism.

mod config;
mod trace;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{
    build_global_eval_set, label_histogram, load_idx, make_synthetic_blobs, partition, DataError,
    Dataset, Partition,
};
use crate::model::{ModelArch, ModelError, ParamVector};
use crate::noniid::{noniid_degree, NonIidDegreeVector, NonIidError};
use crate::selection::{
    avg_threshold, select_all, select_single_best, select_workers, tradeoff_score, SelectionError,
    SelectionRound,
};
use crate::swarm::{
    self, pso_sgd_step, sample_coefficients, sgd_step, swarm_move, update_global_best,
    update_local_best, GlobalState, SwarmCoefficients, SwarmError, WorkerState,
};

pub use config::{
    Algorithm, DataConfig, DataSource, ExperimentConfig, GradientSource, ModelConfig,
    SwarmGranularity,
};
pub use trace::{CommLedger, RoundRecord, RunMetadata, TrainingTrace, WorkerRecord, TRACE_CSV_HEADER};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Swarm(#[from] SwarmError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    NonIid(#[from] NonIidError),
    #[error("aggregation needs at least one selected update")]
    EmptySelection,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl OrchestratorError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// w_{t+1} = w_t + (1 / sum s) * sum_{selected} (new_i - old_i)
pub fn aggregate(
    global: &ParamVector,
    updates: &[(ParamVector, ParamVector)],
    indicator: &[bool],
) -> Result<ParamVector, OrchestratorError> {
    let selected: Vec<&(ParamVector, ParamVector)> = updates
        .iter()
        .zip(indicator)
        .filter_map(|(u, &s)| s.then_some(u))
        .collect();
    if selected.is_empty() {
        return Err(OrchestratorError::EmptySelection);
    }
    let count = selected.len() as f64;
    let mut sum = vec![0.0; global.len()];
    for (new, old) in selected {
        for ((s, n), o) in sum.iter_mut().zip(&new.values).zip(&old.values) {
            *s += n - o;
        }
    }
    Ok(ParamVector::from_vec(
        global
            .values
            .iter()
            .zip(sum)
            .map(|(w, s)| w + s / count)
            .collect(),
    ))
}

/// Everything derived from the data configuration.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub source: Dataset,
    pub partition: Partition,
    pub shards: Vec<Dataset>,
    /// Shared evaluation set D_g.
    pub eval: Dataset,
    pub test: Dataset,
    pub arch: ModelArch,
    pub degrees: NonIidDegreeVector,
}

impl ExperimentData {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let (source, test) = load_source(&config.data)?;
        let partition = partition(&source, &config.partition)?;
        let shards = partition.datasets(&source);
        let eval = build_global_eval_set(&source, config.data.eval_size, config.data.eval_seed)?;
        let arch = ModelArch {
            input_dim: source.dim(),
            hidden: config.model.hidden.clone(),
            num_classes: source.num_classes(),
        };
        let hists: Vec<_> = shards.iter().map(label_histogram).collect();
        let degrees = noniid_degree(&hists, &label_histogram(&eval), &config.degree)?;
        Ok(Self {
            source,
            partition,
            shards,
            eval,
            test,
            arch,
            degrees,
        })
    }
}

/// Training source and accuracy test set.
pub fn load_source(cfg: &DataConfig) -> Result<(Dataset, Dataset), OrchestratorError> {
    match &cfg.source {
        DataSource::Blobs {
            num_classes,
            dim,
            n,
            separation,
            seed,
        } => {
            let all = make_synthetic_blobs(*num_classes, *dim, n + cfg.test_size, *separation, *seed)?;
            Ok(all.split_tail(cfg.test_size)?)
        }
        DataSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(images, labels)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let mut test = load_idx(ti, tl)?;
                    if test.len() > cfg.test_size && cfg.test_size > 0 {
                        test = test.subset(&(0..cfg.test_size).collect::<Vec<_>>());
                    }
                    Ok((train, test))
                }
                (None, None) => Ok(train.split_tail(cfg.test_size)?),
                _ => Err(OrchestratorError::Config {
                    field: "data.source.idx".into(),
                    message: "test_images and test_labels must be given together".into(),
                }),
            }
        }
    }
}

/// What one worker sends back at the barrier.
struct WorkerOutcome {
    new_w: ParamVector,
    velocity: ParamVector,
    local_best: ParamVector,
    f: f64,
    coeffs: SwarmCoefficients,
    local_loss_rose: bool,
    grad_norm_sq: f64,
    v_norm: f64,
    cos_local: Option<f64>,
    cos_global: Option<f64>,
}

fn cosine(a: &ParamVector, b_negated: &ParamVector) -> Option<f64> {
    let na = a.norm();
    let nb = b_negated.norm();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((-a.dot(b_negated) / (na * nb)).clamp(-1.0, 1.0))
}

/// Simulation state between rounds.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub workers: Vec<WorkerState>,
    pub global: GlobalState,
    pub threshold_prev: Option<f64>,
    pub round: usize,
    pub ledger: CommLedger,
    pub initial_loss: f64,
    pool: rayon::ThreadPool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, OrchestratorError> {
        let data = ExperimentData::prepare(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: ExperimentConfig, data: ExperimentData) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let w0 = data.arch.init_params(config.seed);
        let eta = data.degrees.oriented(config.eta_complement);
        let workers = eta
            .iter()
            .enumerate()
            .map(|(i, &e)| WorkerState::new(i, &w0, e))
            .collect();
        let initial_loss = data.arch.rmse_loss(&w0, &data.eval)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| OrchestratorError::Config {
                field: "parallelism".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            config,
            data,
            workers,
            global: GlobalState::new(w0),
            threshold_prev: None,
            round: 0,
            ledger: CommLedger::default(),
            initial_loss,
            pool,
        })
    }

    pub fn num_params(&self) -> usize {
        self.data.arch.num_params()
    }

    fn gradient_data(&self, worker: usize) -> &Dataset {
        match self.config.gradient_source {
            GradientSource::Local => &self.data.shards[worker],
            GradientSource::Global => &self.data.eval,
        }
    }

    /// Minibatch index lists for one worker and round: per epoch, a fresh
    /// shuffle of the gradient data cut into batches, of which the first
    /// `batches_per_epoch` are kept.
    fn minibatches(&self, worker: usize, round: usize) -> Vec<Vec<usize>> {
        let n = self.gradient_data(worker).len();
        let per_epoch = self.config.batches_per_epoch.unwrap_or(usize::MAX);
        let mut rng = swarm::stream(self.config.seed, round, worker, 1);
        let mut batches = Vec::new();
        for _ in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            batches.extend(
                order
                    .chunks(self.config.batch_size)
                    .take(per_epoch)
                    .map(<[usize]>::to_vec),
            );
        }
        batches
    }

    fn local_phase(&self, algorithm: Algorithm, ws: &WorkerState, round: usize) -> Result<WorkerOutcome, OrchestratorError> {
        let arch = &self.data.arch;
        let data = self.gradient_data(ws.id);
        let start = &self.global.w;
        let coeffs = sample_coefficients(&self.config.swarm, round, ws.id);
        let local_best = update_local_best(ws);
        let global_best = update_global_best(&self.global);
        let batches = self.minibatches(ws.id, round);

        let (new_w, velocity) = if !algorithm.uses_swarm() {
            let mut w = start.clone();
            for b in &batches {
                w = sgd_step(&w, coeffs.lr, arch, data, b)?;
            }
            let v = w.sub(start);
            (w, v)
        } else {
            match self.config.granularity {
                SwarmGranularity::Round => {
                    let mut w = start.clone();
                    for b in &batches {
                        w = sgd_step(&w, coeffs.lr, arch, data, b)?;
                    }
                    let displacement = w.sub(start);
                    let new_w = swarm_move(start, &ws.v, &local_best, &global_best, &coeffs, &displacement);
                    let v = new_w.sub(start);
                    (new_w, v)
                }
                SwarmGranularity::Minibatch => {
                    let mut particle = ws.clone();
                    particle.w = start.clone();
                    particle.w_local_best = local_best.clone();
                    let mut gs = self.global.clone();
                    gs.w_global_best = global_best.clone();
                    for b in &batches {
                        let (w, v) = pso_sgd_step(&particle, &gs, &coeffs, arch, data, b, round)?;
                        particle.w = w;
                        particle.v = v;
                    }
                    (particle.w, particle.v)
                }
            }
        };
        if !new_w.is_finite() {
            return Err(SwarmError::Divergence { round, worker: ws.id }.into());
        }

        let f = arch.rmse_loss(&new_w, &self.data.eval)?;
        let grad = arch.grad(&new_w, data)?;
        let displacement = new_w.sub(start);
        Ok(WorkerOutcome {
            local_loss_rose: matches!((ws.f_prev, ws.f_curr), (Some(a), Some(b)) if b > a),
            grad_norm_sq: grad.norm_sq(),
            v_norm: displacement.norm(),
            cos_local: cosine(&displacement, &grad),
            cos_global: cosine(&self.global.v, &grad),
            new_w,
            velocity,
            local_best,
            f,
            coeffs,
        })
    }

    fn select(&self, algorithm: Algorithm, theta: &[f64], f: &[f64], round: usize) -> Result<SelectionRound, OrchestratorError> {
        Ok(match algorithm {
            Algorithm::FedAvg => select_all(theta, round),
            Algorithm::VanillaDsl => {
                let mut s = select_single_best(f, round)?;
                s.theta = theta.to_vec();
                s
            }
            Algorithm::Mdsl | Algorithm::MultiDsl => {
                if self.config.force_full_participation {
                    select_all(theta, round)
                } else {
                    select_workers(theta, self.threshold_prev, round)?
                }
            }
        })
    }

    /// Runs one communication round with the configured algorithm.
    pub fn run_round(&mut self) -> Result<RoundRecord, OrchestratorError> {
        self.run_round_as(self.config.algorithm)
    }

    pub fn run_round_as(&mut self, algorithm: Algorithm) -> Result<RoundRecord, OrchestratorError> {
        let round = self.round + 1;
        let tau = match algorithm {
            Algorithm::MultiDsl | Algorithm::VanillaDsl => 1.0,
            Algorithm::Mdsl | Algorithm::FedAvg => self.config.tau,
        };

        // local phase; the global state is read-only until the barrier
        let this = &*self;
        let outcomes: Vec<WorkerOutcome> = this.pool.install(|| {
            this.workers
                .par_iter()
                .map(|ws| this.local_phase(algorithm, ws, round))
                .collect::<Result<Vec<_>, _>>()
        })?;

        let f: Vec<f64> = outcomes.iter().map(|o| o.f).collect();
        let theta = self
            .workers
            .iter()
            .zip(&f)
            .map(|(ws, &fi)| tradeoff_score(fi, ws.eta, tau))
            .collect::<Result<Vec<_>, _>>()?;
        let selection = self.select(algorithm, &theta, &f, round)?;

        let start = self.global.w.clone();
        let updates: Vec<(ParamVector, ParamVector)> = outcomes
            .iter()
            .map(|o| (o.new_w.clone(), start.clone()))
            .collect();
        let new_global = aggregate(&start, &updates, &selection.indicator)?;
        let global_loss = self.data.arch.rmse_loss(&new_global, &self.data.eval)?;
        let global_acc = self.data.arch.accuracy(&new_global, &self.data.test)?;
        let global_loss_fell =
            matches!((self.global.f_prev, self.global.f_curr), (Some(a), Some(b)) if a > b);

        let n = self.num_params() as u64;
        let uploads = n * selection.num_selected() as u64;
        let broadcasts = n * self.workers.len() as u64;
        self.ledger.push(uploads, broadcasts);

        let global_v_norm = self.global.v.norm();
        let mut records = Vec::with_capacity(self.workers.len());
        for ((ws, o), (&th, &sel)) in self
            .workers
            .iter_mut()
            .zip(outcomes)
            .zip(theta.iter().zip(&selection.indicator))
        {
            records.push(WorkerRecord {
                worker: ws.id,
                f: o.f,
                theta: th,
                eta: ws.eta,
                selected: sel,
                c0: o.coeffs.c0,
                c1: o.coeffs.c1,
                c2: o.coeffs.c2,
                lr: o.coeffs.lr,
                local_loss_rose: o.local_loss_rose,
                grad_norm_sq: o.grad_norm_sq,
                v_norm: o.v_norm,
                cos_local: o.cos_local,
                global_v_norm,
                cos_global: o.cos_global,
            });
            ws.record(o.new_w, o.f);
            ws.v = o.velocity;
            ws.w_local_best = o.local_best;
            ws.theta = th;
        }
        self.global.w_global_best = update_global_best(&self.global);
        self.global.advance(new_global, global_loss);
        self.threshold_prev = Some(avg_threshold(&theta)?);
        self.round = round;

        Ok(RoundRecord {
            round,
            global_loss,
            global_acc,
            num_selected: selection.num_selected(),
            comm_upload: uploads,
            comm_broadcast: broadcasts,
            fallback: selection.fallback,
            threshold: selection.threshold,
            global_loss_fell,
            workers: records,
        })
    }

    /// Runs the remaining rounds and assembles the trace.
    pub fn run(mut self) -> Result<TrainingTrace, OrchestratorError> {
        let started = Instant::now();
        let mut rounds = Vec::with_capacity(self.config.rounds);
        while self.round < self.config.rounds {
            rounds.push(self.run_round()?);
        }
        Ok(TrainingTrace {
            num_params: self.num_params(),
            initial_loss: self.initial_loss,
            rounds,
            ledger: self.ledger,
            final_params: self.global.w,
            meta: RunMetadata {
                wall_clock_secs: started.elapsed().as_secs_f64(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            config: self.config,
        })
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<TrainingTrace, OrchestratorError> {
    Experiment::new(config.clone())?.run()
}

pub fn fedavg_round(exp: &mut Experiment) -> Result<RoundRecord, OrchestratorError> {
    exp.run_round_as(Algorithm::FedAvg)
}

pub fn vanilla_dsl_round(exp: &mut Experiment) -> Result<RoundRecord, OrchestratorError> {
    exp.run_round_as(Algorithm::VanillaDsl)
}

pub fn multi_dsl_round(exp: &mut Experiment) -> Result<RoundRecord, OrchestratorError> {
    exp.run_round_as(Algorithm::MultiDsl)
}
