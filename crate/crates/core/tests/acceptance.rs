use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use mdsl_core::analysis::{diagnose, grad_norm_stats, DiagnosticsReport, ModelObjective, ProbeSettings};
use mdsl_core::data::{label_histogram, make_synthetic_blobs, partition, Dataset, PartitionSpec};
use mdsl_core::model::{ModelArch, ParamVector};
use mdsl_core::noniid::{
    fit_coefficients, heterogeneity_components, linear_ground_cost, wasserstein_1d, wasserstein_lp_oracle,
    Observation,
};
use mdsl_core::orchestrator::{aggregate, run_experiment, Algorithm, ExperimentConfig, ExperimentData, TrainingTrace};
use mdsl_core::selection::select_workers;
use mdsl_core::swarm::SwarmConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn random_histogram(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let mut h: Vec<f64> = (0..l)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    if h.iter().all(|&x| x == 0.0) {
        h[rng.random_range(0..l)] = 1.0;
    }
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|x| *x /= s);
    h
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for l in 2..=8 {
        let cost = linear_ground_cost(l);
        for _ in 0..40 {
            let p = random_histogram(&mut rng, l);
            let q = random_histogram(&mut rng, l);
            let w = wasserstein_1d(&p, &q).map_err(|e| e.to_string())?;
            let (lp, _) = wasserstein_lp_oracle(&p, &q, &cost).map_err(|e| e.to_string())?;
            worst = worst.max((w - lp).abs());
            cases += 1;
        }
    }
    let msg = format!("{cases} pairs, max |W - LP| = {worst:.3e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let mut d = Dataset::new(dim, classes);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        d.push(&x, rng.random_range(0..classes)).unwrap();
    }
    d
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for case in 0..50 {
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let hidden = match case % 3 {
            0 => vec![],
            1 => vec![rng.random_range(1..6)],
            _ => vec![rng.random_range(1..5), rng.random_range(1..5)],
        };
        let arch = ModelArch {
            input_dim: dim,
            hidden,
            num_classes: classes,
        };
        let mut w = arch.init_params(case);
        for v in &mut w.values {
            *v += rng.random_range(-0.5..0.5);
        }
        let size = rng.random_range(1..9);
        let batch = random_dataset(&mut rng, size, dim, classes);
        let g = arch.grad(&w, &batch).map_err(|e| e.to_string())?;
        for k in 0..w.len() {
            let mut plus = w.clone();
            plus.values[k] += h;
            let mut minus = w.clone();
            minus.values[k] -= h;
            let fd = (arch.rmse_loss(&plus, &batch).unwrap() - arch.rmse_loss(&minus, &batch).unwrap()) / (2.0 * h);
            let rel = (g.values[k] - fd).abs() / g.values[k].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let msg = format!("50 cases, max relative error = {worst:.3e}");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_3() -> Outcome {
    let mut mdsl = ExperimentConfig::blobs(Algorithm::Mdsl, 5, 0.1, 5, 3);
    mdsl.swarm = SwarmConfig {
        seed: 3,
        ..SwarmConfig::frozen(0.0, 0.0, 0.0)
    };
    mdsl.force_full_participation = true;
    let mut fedavg = mdsl.clone();
    fedavg.algorithm = Algorithm::FedAvg;
    let a = run_experiment(&mdsl).map_err(|e| e.to_string())?;
    let b = run_experiment(&fedavg).map_err(|e| e.to_string())?;
    let worst = a
        .final_params
        .values
        .iter()
        .zip(&b.final_params.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let msg = format!("5 rounds, C=5, max |w_mdsl - w_fedavg| = {worst:.3e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Compensated summation, one coordinate at a time.
fn kahan_mean_delta(updates: &[(ParamVector, ParamVector)], indicator: &[bool], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut n = 0usize;
    for ((new, old), &s) in updates.iter().zip(indicator) {
        if s {
            let y = (new.values[k] - old.values[k]) - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            n += 1;
        }
    }
    sum / n as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..12);
        let gen = |rng: &mut ChaCha8Rng| ParamVector::from_vec((0..n).map(|_| rng.random_range(-3.0..3.0)).collect());
        let global = gen(&mut rng);
        let updates: Vec<_> = (0..c).map(|_| (gen(&mut rng), gen(&mut rng))).collect();
        let mut indicator: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
        if !indicator.iter().any(|&s| s) {
            indicator[rng.random_range(0..c)] = true;
        }
        let out = aggregate(&global, &updates, &indicator).map_err(|e| e.to_string())?;
        for k in 0..n {
            let expected = global.values[k] + kahan_mean_delta(&updates, &indicator, k);
            worst = worst.max((out.values[k] - expected).abs());
        }
    }
    let msg = format!("300 random selections, max deviation = {worst:.3e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_5() -> Outcome {
    let alphas = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];
    let source = make_synthetic_blobs(10, 16, 30_000, 4.0, 5).map_err(|e| e.to_string())?;
    let global = label_histogram(&source);
    let mut ratio = Vec::new();
    let mut wd = Vec::new();
    for &alpha in &alphas {
        let (mut r, mut w, mut n) = (0.0, 0.0, 0.0);
        for seed in 0..20 {
            let spec = PartitionSpec::uniform_alpha(50, alpha, 512, seed);
            let part = partition(&source, &spec).map_err(|e| e.to_string())?;
            for shard in part.datasets(&source) {
                let c = heterogeneity_components(&label_histogram(&shard), &global).map_err(|e| e.to_string())?;
                r += c.label_ratio;
                w += c.wd;
                n += 1.0;
            }
        }
        ratio.push(r / n);
        wd.push(w / n);
    }
    let ratio_violations = ratio.windows(2).filter(|p| p[1] < p[0]).count();
    let wd_violations = wd.windows(2).filter(|p| p[1] > p[0]).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let msg = format!(
        "ratio [{}] ({ratio_violations} violations), W [{}] ({wd_violations} violations)",
        fmt(&ratio),
        fmt(&wd)
    );
    if ratio_violations <= 1 && wd_violations <= 1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const ALGORITHMS: [Algorithm; 3] = [Algorithm::Mdsl, Algorithm::MultiDsl, Algorithm::FedAvg];

/// traces[algorithm][seed] for the heterogeneity runs, shared by several criteria.
fn heterogeneity_runs() -> &'static Vec<Vec<TrainingTrace>> {
    static RUNS: OnceLock<Vec<Vec<TrainingTrace>>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let configs: Vec<Vec<ExperimentConfig>> = ALGORITHMS
            .iter()
            .map(|&alg| {
                SEEDS
                    .iter()
                    .map(|&s| ExperimentConfig::blobs(alg, 10, 0.1, 40, s))
                    .collect()
            })
            .collect();
        std::thread::scope(|scope| {
            let handles: Vec<Vec<_>> = configs
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|cfg| scope.spawn(move || run_experiment(cfg).expect("heterogeneity run")))
                        .collect()
                })
                .collect();
            handles
                .into_iter()
                .map(|row| row.into_iter().map(|h| h.join().unwrap()).collect())
                .collect()
        })
    })
}

fn mean_final_accuracy(traces: &[TrainingTrace]) -> f64 {
    traces.iter().map(|t| t.final_accuracy().unwrap()).sum::<f64>() / traces.len() as f64
}

fn criterion_6() -> Outcome {
    let runs = heterogeneity_runs();
    let acc: Vec<f64> = runs.iter().map(|r| mean_final_accuracy(r)).collect();
    let ordering = if acc[0] >= acc[1] && acc[1] >= acc[2] {
        "holds"
    } else {
        "does not hold"
    };
    let msg = format!(
        "mean final acc M-DSL {:.4}, Multi-DSL {:.4}, FedAvg {:.4}; full ordering {ordering}",
        acc[0], acc[1], acc[2]
    );
    if acc[0] >= acc[2] - 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Outcome {
    let runs = heterogeneity_runs();
    let mut partial_rounds = 0;
    for (mdsl, fedavg) in runs[0].iter().zip(&runs[2]) {
        let n = mdsl.num_params as u64;
        for r in &mdsl.rounds {
            let selected = r.workers.iter().filter(|w| w.selected).count();
            if selected != r.num_selected || r.comm_upload != n * selected as u64 {
                return Err(format!(
                    "round {}: upload {} but N * sum s = {}",
                    r.round,
                    r.comm_upload,
                    n * selected as u64
                ));
            }
        }
        let summed: u64 = mdsl.rounds.iter().map(|r| r.comm_upload).sum();
        if summed != mdsl.ledger.total_uploads() {
            return Err("ledger total disagrees with per-round uploads".into());
        }
        let any_partial = mdsl.rounds.iter().any(|r| r.num_selected < r.workers.len());
        if any_partial {
            partial_rounds += mdsl.rounds.iter().filter(|r| r.num_selected < r.workers.len()).count();
            if mdsl.ledger.total_uploads() >= fedavg.ledger.total_uploads() {
                return Err(format!(
                    "M-DSL uploaded {} >= FedAvg {} despite partial rounds",
                    mdsl.ledger.total_uploads(),
                    fedavg.ledger.total_uploads()
                ));
            }
        }
    }
    let mdsl_total: u64 = runs[0].iter().map(|t| t.ledger.total_uploads()).sum();
    let fedavg_total: u64 = runs[2].iter().map(|t| t.ledger.total_uploads()).sum();
    Ok(format!(
        "uploads M-DSL {mdsl_total} vs FedAvg {fedavg_total}, {partial_rounds} partial rounds"
    ))
}

/// Largest-cardinality indicator with theta_i <= bar for every selected i.
fn brute_force_selection(theta: &[f64], bar: f64) -> Vec<bool> {
    let c = theta.len();
    let mut best = 0u32;
    let mut best_size = 0;
    for mask in 0u32..(1 << c) {
        let feasible = (0..c).all(|i| mask & (1 << i) == 0 || theta[i] <= bar);
        if feasible && mask.count_ones() > best_size {
            best = mask;
            best_size = mask.count_ones();
        }
    }
    (0..c).map(|i| best & (1 << i) != 0).collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fallbacks = 0;
    for case in 0..500 {
        let c = rng.random_range(1..11);
        // Coarse grid values so ties at the threshold actually occur.
        let theta: Vec<f64> = (0..c).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let bar = rng.random_range(-1..9) as f64 / 8.0;
        let got = select_workers(&theta, Some(bar), 2).map_err(|e| e.to_string())?;
        let expected = brute_force_selection(&theta, bar);
        let feasible_empty = !expected.iter().any(|&s| s);
        if got.fallback != feasible_empty {
            return Err(format!("case {case}: fallback {} but feasible set empty = {feasible_empty}", got.fallback));
        }
        if feasible_empty {
            fallbacks += 1;
            let min = theta.iter().cloned().fold(f64::INFINITY, f64::min);
            let picked: Vec<usize> = got.selected().collect();
            if picked.len() != 1 || theta[picked[0]] != min {
                return Err(format!("case {case}: fallback did not pick a single argmin worker"));
            }
        } else if got.indicator != expected {
            return Err(format!("case {case}: {:?} != {:?}", got.indicator, expected));
        }
    }
    Ok(format!("500 instances match, {fallbacks} fallback cases"))
}

fn planted_observations(seed: u64, sigma: f64) -> Vec<Observation> {
    let (b1, b2, phi) = (0.286, -0.07, 0.592);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    (0..120)
        .map(|_| {
            let label_ratio = rng.random_range(0.1..1.0);
            let wd = rng.random_range(0.0..4.0);
            let eps = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            Observation {
                label_ratio,
                wd,
                accuracy: b1 * label_ratio + b2 * wd + phi + eps,
            }
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let fit = fit_coefficients(&planted_observations(seed, 0.01), seed).map_err(|e| e.to_string())?;
        let c = fit.coefficients;
        worst = worst
            .max((c.beta1 - 0.286).abs())
            .max((c.beta2 + 0.07).abs())
            .max((c.phi - 0.592).abs());
    }
    let clean = fit_coefficients(&planted_observations(99, 0.0), 99).map_err(|e| e.to_string())?;
    let msg = format!(
        "max coefficient error {worst:.4} over 20 seeds, noiseless R^2 = {:.6}",
        clean.r_squared
    );
    if worst <= 0.05 && clean.r_squared >= 0.99 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10() -> Outcome {
    let mut trends = Vec::new();
    let mut all_fell = true;
    for trace in &heterogeneity_runs()[0] {
        let stats = grad_norm_stats(trace).map_err(|e| e.to_string())?;
        let (early, late) = (stats.running_avg[4], stats.running_avg[39]);
        all_fell &= late < early;
        trends.push(format!("{early:.3}->{late:.3}"));
    }
    let trace = &heterogeneity_runs()[0][0];
    let data = ExperimentData::prepare(&trace.config).map_err(|e| e.to_string())?;
    let oracle = ModelObjective {
        arch: &data.arch,
        data: &data.eval,
    };
    let report: DiagnosticsReport = diagnose(trace, &oracle, ProbeSettings::default()).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    let finite = ["k1", "k2", "L_hat", "phi_bar", "rhs"]
        .iter()
        .all(|k| json[k].as_f64().is_some_and(f64::is_finite));
    let msg = format!(
        "running avg |grad|^2 T=5->T=40 per seed [{}]; k1 {:.3} k2 {:.3} L_hat {:.3} phi_bar {:.3} rhs {:.3e}",
        trends.join(" "),
        report.k1,
        report.k2,
        report.l_hat,
        report.phi_bar,
        report.rhs
    );
    if all_fell && finite {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_11() -> Outcome {
    let mut csvs = Vec::new();
    for parallelism in [1, 4, 1, 4] {
        let mut cfg = ExperimentConfig::blobs(Algorithm::Mdsl, 8, 0.1, 6, 21);
        cfg.parallelism = parallelism;
        csvs.push(run_experiment(&cfg).map_err(|e| e.to_string())?.to_csv());
    }
    if csvs.iter().all(|c| c == &csvs[0]) {
        Ok(format!("4 runs, {} bytes each, identical", csvs[0].len()))
    } else {
        Err("trace CSVs differ".into())
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("wasserstein oracle equivalence", criterion_1),
        ("gradient correctness", criterion_2),
        ("fedavg reduction", criterion_3),
        ("aggregation exactness", criterion_4),
        ("heterogeneity monotonicity", criterion_5),
        ("learning over heterogeneity", criterion_6),
        ("communication accounting", criterion_7),
        ("selection rule correctness", criterion_8),
        ("coefficient fit recovery", criterion_9),
        ("convergence diagnostics", criterion_10),
        ("reproducibility", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
