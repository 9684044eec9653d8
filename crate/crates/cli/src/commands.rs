use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::Utc;
use mdsl_core::analysis::{diagnose, AnalysisError, ModelObjective, ProbeSettings};
use mdsl_core::data::{label_histogram, AlphaGroup, DataError};
use mdsl_core::noniid::{fit_coefficients, heterogeneity_components, write_observations_to, Observation};
use mdsl_core::orchestrator::{
    Algorithm, DataSource, Experiment, ExperimentConfig, ExperimentData, OrchestratorError, TrainingTrace,
};

use crate::output::{resolve_dir, OutputSet, RunManifest};
use crate::{Failure, OutputArgs};

fn classify(e: OrchestratorError) -> Failure {
    match e {
        OrchestratorError::Config { .. }
        | OrchestratorError::Schema(_)
        | OrchestratorError::Io { .. }
        | OrchestratorError::Data(DataError::Io { .. } | DataError::Format { .. }) => Failure::Input(e.into()),
        other => Failure::Domain(other.into()),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Input)?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::Input)?;
    config.validate().map_err(classify)?;
    Ok(config)
}

#[derive(Debug, Default)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<(), Failure> {
        if let Some(a) = self.algorithm {
            config.algorithm = a;
        }
        if let Some(r) = self.rounds {
            config.rounds = r;
        }
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        if let Some(s) = self.seed {
            config.seed = s;
            config.partition.seed = s;
            config.swarm.seed = s;
            config.data.eval_seed = s;
            if let DataSource::Blobs { seed, .. } = &mut config.data.source {
                *seed = s;
            }
        }
        config.validate().map_err(classify)
    }
}

pub fn partition(config_path: &Path, output: &OutputArgs) -> Result<(), Failure> {
    let started = Utc::now();
    let config = load_config(config_path)?;
    let data = ExperimentData::prepare(&config).map_err(classify)?;

    let mut out = OutputSet::new(&resolve_dir(output, config_path))?;
    out.add_json("partition.json", &data.partition.manifest(&data.source))?;
    for shard in &data.partition.shards {
        out.add_json(&format!("shards/worker_{:03}.json", shard.worker), shard)?;
    }
    let mut table = String::from("worker,alpha,wd,label_ratio,raw,eta\n");
    for (i, shard) in data.partition.shards.iter().enumerate() {
        let c = &data.degrees.components[i];
        writeln!(
            table,
            "{},{},{},{},{},{}",
            shard.worker, shard.alpha, c.wd, c.label_ratio, data.degrees.raw[i], data.degrees.eta[i]
        )
        .unwrap();
    }
    out.add("degrees.csv", table.as_bytes())?;
    let dir = out.dir().to_path_buf();
    RunManifest::finish("partition", config, started, out)?;
    println!(
        "partitioned {} workers into {}",
        data.partition.shards.len(),
        dir.display()
    );
    Ok(())
}

pub fn run(config_path: &Path, output: &OutputArgs, overrides: Overrides) -> Result<(), Failure> {
    let started = Utc::now();
    let mut config = load_config(config_path)?;
    overrides.apply(&mut config)?;
    let trace = mdsl_core::run_experiment(&config).map_err(classify)?;

    let mut out = OutputSet::new(&resolve_dir(output, config_path))?;
    out.add("trace.csv", trace.to_csv().as_bytes())?;
    out.add_json("trace.json", &trace)?;
    let dir = out.dir().to_path_buf();
    RunManifest::finish("run", config, started, out)?;
    println!(
        "{} rounds of {}: final accuracy {:.4}, uploads {}, written to {}",
        trace.rounds.len(),
        trace.config.algorithm.name(),
        trace.final_accuracy().unwrap_or(f64::NAN),
        trace.ledger.total_uploads(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug)]
struct SweepRow {
    alpha: f64,
    mean_wd: f64,
    mean_label_ratio: f64,
    mean_eta: f64,
    final_accuracy: f64,
}

pub fn sweep(config_path: &Path, alphas: &[f64], output: &OutputArgs) -> Result<(), Failure> {
    let started = Utc::now();
    let base = load_config(config_path)?;
    if alphas.is_empty() {
        return Err(Failure::Input(anyhow!("--alphas must list at least one value")));
    }
    let workers = base.partition.num_workers();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut config = base.clone();
        config.partition.groups = vec![AlphaGroup { workers, alpha }];
        let data = ExperimentData::prepare(&config).map_err(classify)?;
        let global = label_histogram(&data.eval);
        let comps = data
            .shards
            .iter()
            .map(|s| heterogeneity_components(&label_histogram(s), &global))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| classify(e.into()))?;
        let n = comps.len() as f64;
        let eta_mean = data.degrees.eta.iter().sum::<f64>() / n;
        let trace = Experiment::with_data(config, data)
            .and_then(Experiment::run)
            .map_err(classify)?;
        let row = SweepRow {
            alpha,
            mean_wd: comps.iter().map(|c| c.wd).sum::<f64>() / n,
            mean_label_ratio: comps.iter().map(|c| c.label_ratio).sum::<f64>() / n,
            mean_eta: eta_mean,
            final_accuracy: trace.final_accuracy().unwrap_or(f64::NAN),
        };
        println!(
            "alpha {:>8}: W {:.4}  ratio {:.4}  eta {:.4}  accuracy {:.4}",
            row.alpha, row.mean_wd, row.mean_label_ratio, row.mean_eta, row.final_accuracy
        );
        rows.push(row);
    }

    let mut table = String::from("alpha,mean_wd,mean_label_ratio,mean_eta,final_accuracy\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{}",
            r.alpha, r.mean_wd, r.mean_label_ratio, r.mean_eta, r.final_accuracy
        )
        .unwrap();
    }
    let observations: Vec<Observation> = rows
        .iter()
        .map(|r| Observation {
            label_ratio: r.mean_label_ratio,
            wd: r.mean_wd,
            accuracy: r.final_accuracy,
        })
        .collect();
    let mut obs_csv = Vec::new();
    write_observations_to(&mut obs_csv, &observations).map_err(|e| Failure::Input(e.into()))?;

    let mut out = OutputSet::new(&resolve_dir(output, config_path))?;
    out.add("sweep.csv", table.as_bytes())?;
    out.add("observations.csv", &obs_csv)?;
    if observations.len() >= 4 {
        match fit_coefficients(&observations, base.seed) {
            Ok(fit) => {
                let c = fit.coefficients;
                println!(
                    "fit: beta1 {:.4}  beta2 {:.4}  phi {:.4}  R^2 {:.4}",
                    c.beta1, c.beta2, c.phi, fit.r_squared
                );
                out.add_json("fit.json", &fit)?;
            }
            Err(e) => eprintln!("warning: coefficient fit skipped: {e}"),
        }
    }
    RunManifest::finish("sweep", base, started, out)?;
    Ok(())
}

pub fn analyze(traces: &[PathBuf], out: Option<&Path>, probes: usize, radius: f64, probe_seed: u64) -> Result<(), Failure> {
    let settings = ProbeSettings {
        num_probes: probes,
        radius,
        seed: probe_seed,
    };
    let mut summary = Vec::with_capacity(traces.len());
    for path in traces {
        let trace = TrainingTrace::read_json(path).map_err(classify)?;
        let data = ExperimentData::prepare(&trace.config).map_err(classify)?;
        let oracle = ModelObjective {
            arch: &data.arch,
            data: &data.eval,
        };
        let report = diagnose(&trace, &oracle, settings).map_err(|e| match e {
            AnalysisError::MissingGradients => {
                Failure::Input(anyhow!("schema error in {}: {e}", path.display()))
            }
            other => Failure::Domain(anyhow::Error::new(other).context(format!("analyzing {}", path.display()))),
        })?;

        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        let stem = path.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned());
        let mut set = OutputSet::new(&dir)?;
        set.add_json(&format!("{stem}.diagnostics.json"), &report)?;
        let written = set.commit()?;
        println!(
            "{}: phi_bar {:.4}  rhs {:.4e}  running avg {:.4e}  exponent {}  -> {}",
            path.display(),
            report.phi_bar,
            report.rhs,
            report.measured_running_avg,
            report.exponent.map_or_else(|| "n/a".into(), |x| format!("{x:.3}")),
            written[0].display()
        );
        summary.push((path.clone(), trace));
    }

    println!("{:<40} {:>12} {:>7} {:>14} {:>14} {:>9}", "trace", "algorithm", "rounds", "uploads", "broadcasts", "accuracy");
    for (path, t) in &summary {
        println!(
            "{:<40} {:>12} {:>7} {:>14} {:>14} {:>9.4}",
            path.display().to_string(),
            t.config.algorithm.name(),
            t.rounds.len(),
            t.ledger.total_uploads(),
            t.ledger.total_broadcasts(),
            t.final_accuracy().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
