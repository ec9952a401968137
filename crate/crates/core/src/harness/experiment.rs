//! Monte Carlo runs over replications and the files they produce.
//!
//! Replication `r` (zero-based) draws its system randomness from
//! `RngStream::new(seed, r)` for every policy, so policies face identical
//! chain paths and noise. Replications run in parallel chunks and are folded
//! in index order, which keeps every output byte-identical across runs and
//! thread counts.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{log_checkpoints, ExperimentConfig, PolicySpec};
use crate::metrics::{fit_power_law, Aggregate, MetricsError, RegretSeries};
use crate::oracle::{OptimalInputs, OracleError};
use crate::policies::{GreedyLse, Mspsa, OraclePolicy, Policy};
use crate::simulate::{Episode, EpisodeError, RngStream, Trajectory};

/// Replications simulated concurrently before folding.
const CHUNK: usize = 16;

/// z-value for two-sided 95% intervals.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("policy {policy}, replication {replication}: {source}")]
    Episode {
        policy: String,
        replication: u64,
        #[source]
        source: EpisodeError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("replication {replication} outside 1..={replications}")]
    UnknownReplication { replication: u64, replications: u64 },
    #[error("horizon {0} does not fit in memory on this platform")]
    HorizonTooLarge(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Build the policy described by `spec`.
pub fn build_policy(
    spec: &PolicySpec,
    config: &ExperimentConfig,
    optimal: &OptimalInputs,
) -> Box<dyn Policy> {
    let objective = config.model.objective.clone();
    let feasible = config.feasible.clone();
    let start = config.initial_input.clone();
    match spec {
        PolicySpec::Mspsa { perturbation, .. } => {
            let gains = spec.gains().expect("validated mspsa gains");
            let policy = Mspsa::new(objective, feasible, start, gains, *perturbation)
                .expect("initial input matches the box");
            Box::new(policy.with_name(spec.name()))
        }
        PolicySpec::GreedyLse { .. } => {
            Box::new(GreedyLse::new(objective, feasible, start).with_name(spec.name()))
        }
        PolicySpec::Oracle { .. } => Box::new(OraclePolicy::new(optimal.clone())),
    }
}

/// Curves of one policy across all replications.
#[derive(Debug, Clone)]
pub struct PolicyResult {
    pub spec: PolicySpec,
    pub aggregate: Aggregate,
    /// `[replication][checkpoint]` cumulative regret.
    pub checkpoint_regret: Vec<Vec<f64>>,
    /// Periods in which the policy repeated its previous input.
    pub fallbacks: u64,
}

impl PolicyResult {
    pub fn name(&self) -> &str {
        self.spec.name()
    }
}

fn horizon_len(config: &ExperimentConfig) -> Result<usize, ExperimentError> {
    usize::try_from(config.horizon)
        .ok()
        .filter(|t| t.checked_mul(32).is_some())
        .ok_or(ExperimentError::HorizonTooLarge(config.horizon))
}

fn run_replication(
    config: &ExperimentConfig,
    optimal: &OptimalInputs,
    spec: &PolicySpec,
    replication: u64,
) -> Result<(RegretSeries, u64), ExperimentError> {
    let t = horizon_len(config)?;
    let mut policy = build_policy(spec, config, optimal);
    let mut rng = RngStream::new(config.seed, replication);
    let mut series = RegretSeries::with_capacity(replication, t, config.model.state_count());
    let mut fallbacks = 0;
    Episode::new(&config.model, Some(optimal))
        .run_with(&mut policy, config.horizon, &mut rng, |rec| {
            fallbacks += u64::from(rec.fallback);
            series.push(&rec);
        })
        .map_err(|source| ExperimentError::Episode {
            policy: spec.name().to_string(),
            replication,
            source,
        })?;
    Ok((series, fallbacks))
}

/// Simulate every configured policy; no files are touched.
pub fn simulate_policies(config: &ExperimentConfig) -> Result<Vec<PolicyResult>, ExperimentError> {
    let optimal = OptimalInputs::compute(&config.model)?;
    let t = horizon_len(config)?;
    let reps: Vec<u64> = (0..config.replications).collect();
    config
        .policies
        .iter()
        .map(|spec| {
            let mut aggregate = Aggregate::new(t);
            let mut checkpoint_regret = Vec::with_capacity(reps.len());
            let mut fallbacks = 0;
            for chunk in reps.chunks(CHUNK) {
                let runs: Vec<_> = chunk
                    .par_iter()
                    .map(|&r| run_replication(config, &optimal, spec, r))
                    .collect();
                for run in runs {
                    let (series, fb) = run?;
                    checkpoint_regret.push(
                        config
                            .checkpoints
                            .iter()
                            .map(|&c| series.cumulative_regret[c as usize - 1])
                            .collect(),
                    );
                    fallbacks += fb;
                    aggregate.push(&series)?;
                }
            }
            Ok(PolicyResult {
                spec: spec.clone(),
                aggregate,
                checkpoint_regret,
                fallbacks,
            })
        })
        .collect()
}

/// Run one replication (one-based) of the named policy and keep every record.
pub fn trace_replication(
    config: &ExperimentConfig,
    policy_name: &str,
    replication: u64,
) -> Result<Trajectory, ExperimentError> {
    if replication == 0 || replication > config.replications {
        return Err(ExperimentError::UnknownReplication {
            replication,
            replications: config.replications,
        });
    }
    let spec = config
        .policies
        .iter()
        .find(|p| p.name() == policy_name)
        .ok_or_else(|| ExperimentError::UnknownPolicy(policy_name.to_string()))?;
    let optimal = OptimalInputs::compute(&config.model)?;
    let mut policy = build_policy(spec, config, &optimal);
    let mut rng = RngStream::new(config.seed, replication - 1);
    Episode::new(&config.model, Some(&optimal))
        .run(&mut policy, config.horizon, &mut rng)
        .map_err(|source| ExperimentError::Episode {
            policy: policy_name.to_string(),
            replication: replication - 1,
            source,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub name: String,
    pub kind: String,
    pub regret_exponent: Option<f64>,
    /// Jackknife 95% interval over replications.
    pub regret_exponent_ci: Option<[f64; 2]>,
    pub final_mean_regret: f64,
    pub final_se_regret: f64,
    pub final_mean_input_mse: f64,
    pub final_mean_est_mse: f64,
    /// Per state (one-based order), slope of the estimate error against the
    /// update count over the last decade reached by every replication.
    pub update_mse_exponents: Vec<Option<f64>>,
    pub fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub horizon: u64,
    pub replications: u64,
    pub slope_window: [f64; 2],
    pub policies: Vec<PolicySummary>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Checkpoints inside the slope window.
fn window_points(config: &ExperimentConfig) -> Vec<usize> {
    let (lo, hi) = config.slope_window;
    (0..config.checkpoints.len())
        .filter(|&k| {
            let t = config.checkpoints[k] as f64;
            t >= lo && t <= hi
        })
        .collect()
}

fn slope_of_means(config: &ExperimentConfig, idx: &[usize], rows: &[&Vec<f64>]) -> Option<f64> {
    let n = rows.len() as f64;
    let xs: Vec<f64> = idx.iter().map(|&k| config.checkpoints[k] as f64).collect();
    let ys: Vec<f64> = idx
        .iter()
        .map(|&k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    fit_power_law(&xs, &ys, f64::MIN_POSITIVE, f64::INFINITY).map(|f| f.slope)
}

/// Regret exponent over the slope window and its jackknife interval.
pub fn regret_exponent(config: &ExperimentConfig, result: &PolicyResult) -> (Option<f64>, Option<[f64; 2]>) {
    let idx = window_points(config);
    let rows: Vec<&Vec<f64>> = result.checkpoint_regret.iter().collect();
    let Some(theta) = slope_of_means(config, &idx, &rows) else {
        return (None, None);
    };
    if rows.len() < 2 {
        return (Some(theta), None);
    }
    let loo: Option<Vec<f64>> = (0..rows.len())
        .map(|drop| {
            let kept: Vec<&Vec<f64>> = rows
                .iter()
                .enumerate()
                .filter(|(r, _)| *r != drop)
                .map(|(_, v)| *v)
                .collect();
            slope_of_means(config, &idx, &kept)
        })
        .collect();
    let ci = loo.map(|loo| {
        let n = loo.len() as f64;
        let mean = loo.iter().sum::<f64>() / n;
        let var = (n - 1.0) / n * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let half = Z95 * var.sqrt();
        [theta - half, theta + half]
    });
    (Some(theta), ci)
}

pub fn summarize(config: &ExperimentConfig, results: &[PolicyResult]) -> ExperimentSummary {
    let last = config.horizon as usize - 1;
    let policies = results
        .iter()
        .map(|res| {
            let agg = &res.aggregate;
            let (exp, ci) = regret_exponent(config, res);
            PolicySummary {
                name: res.name().to_string(),
                kind: res.spec.kind().to_string(),
                regret_exponent: exp,
                regret_exponent_ci: ci,
                final_mean_regret: agg.cumulative_regret.mean(last),
                final_se_regret: agg.cumulative_regret.std_error(last),
                final_mean_input_mse: agg.input_sq_err.mean(last),
                final_mean_est_mse: agg.est_sq_err.mean(last),
                update_mse_exponents: (0..config.model.state_count())
                    .map(|s| agg.update_mse_exponent(s).map(|f| f.slope))
                    .collect(),
                fallbacks: res.fallbacks,
            }
        })
        .collect();
    ExperimentSummary {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        horizon: config.horizon,
        replications: config.replications,
        slope_window: [config.slope_window.0, config.slope_window.1],
        policies,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl ExperimentSummary {
    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mjspsa {}", self.code_version);
        let _ = writeln!(s, "config sha256 {}", self.config_hash);
        let _ = writeln!(
            s,
            "seed {}  horizon {}  replications {}",
            self.seed, self.horizon, self.replications
        );
        let _ = writeln!(
            s,
            "regret exponent window [{}, {}]",
            self.slope_window[0], self.slope_window[1]
        );
        for p in &self.policies {
            let _ = writeln!(s);
            let _ = writeln!(s, "[{}] kind={}", p.name, p.kind);
            let ci = p
                .regret_exponent_ci
                .map_or_else(String::new, |[lo, hi]| format!("  95% CI [{lo:.4}, {hi:.4}]"));
            let _ = writeln!(s, "  regret exponent   {}{ci}", fmt_opt(p.regret_exponent));
            let _ = writeln!(
                s,
                "  final regret      {:.6} (se {:.6})",
                p.final_mean_regret, p.final_se_regret
            );
            let _ = writeln!(s, "  final input mse   {}", fmt_opt(finite(p.final_mean_input_mse)));
            let _ = writeln!(s, "  final est mse     {}", fmt_opt(finite(p.final_mean_est_mse)));
            for (i, e) in p.update_mse_exponents.iter().enumerate() {
                let _ = writeln!(s, "  state {} update-mse exponent {}", i + 1, fmt_opt(*e));
            }
            let _ = writeln!(s, "  fallback periods  {}", p.fallbacks);
        }
        s
    }
}

/// `t,mean_regret,se_regret,mean_input_mse,mean_est_mse` at each checkpoint.
pub fn curve_csv(config: &ExperimentConfig, result: &PolicyResult) -> String {
    let agg = &result.aggregate;
    let mut s = String::from("t,mean_regret,se_regret,mean_input_mse,mean_est_mse\n");
    for &t in &config.checkpoints {
        let i = t as usize - 1;
        let _ = writeln!(
            s,
            "{t},{},{},{},{}",
            agg.cumulative_regret.mean(i),
            agg.cumulative_regret.std_error(i),
            agg.input_sq_err.mean(i),
            agg.est_sq_err.mean(i)
        );
    }
    s
}

/// `state,t_i,mean_est_mse,se_est_mse` on a log grid of update counts.
pub fn update_csv(result: &PolicyResult) -> String {
    let agg = &result.aggregate;
    let mut s = String::from("state,t_i,mean_est_mse,se_est_mse\n");
    for (state, curve) in agg.update_sq_err.iter().enumerate() {
        let top = agg.common_updates(state) as u64;
        if top == 0 {
            continue;
        }
        for k in log_checkpoints(top, 40) {
            let i = k as usize - 1;
            let _ = writeln!(
                s,
                "{},{k},{},{}",
                state + 1,
                curve.mean(i),
                curve.std_error(i)
            );
        }
    }
    s
}

/// Everything an experiment run produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub results: Vec<PolicyResult>,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

fn write_all(dir: &Path, files: &[(String, String)]) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(source) = fs::write(&path, body) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(ExperimentError::Io { path, source });
        }
        written.push(path);
    }
    Ok(written)
}

/// Render all output files without writing them.
pub fn render_outputs(
    config: &ExperimentConfig,
    results: &[PolicyResult],
    summary: &ExperimentSummary,
) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for res in results {
        files.push((format!("{}.csv", res.name()), curve_csv(config, res)));
        if res.aggregate.update_sq_err.iter().any(|c| !c.is_empty()) {
            files.push((format!("{}_updates.csv", res.name()), update_csv(res)));
        }
    }
    let mut json = serde_json::to_string_pretty(summary).expect("summary serializes");
    json.push('\n');
    files.push(("summary.json".into(), json));
    files.push(("summary.txt".into(), summary.to_text()));
    files
}

/// Simulate, summarize and write outputs to the effective output directory.
/// A failed write removes the files this run already wrote.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let results = simulate_policies(config)?;
    let summary = summarize(config, &results);
    let output_dir = config.effective_output_dir();
    let files = write_all(&output_dir, &render_outputs(config, &results, &summary))?;
    Ok(ExperimentOutcome {
        summary,
        results,
        output_dir,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
[model]
objective = "revenue"
[model.chain]
P = [[0.5, 0.5], [0.3, 0.7]]
[[model.states]]
A = [[-1.0]]
b = [1.0]
noise_sigma = 0.3
[[model.states]]
A = [[-2.0]]
b = [2.0]
noise_sigma = 0.3
[feasible]
lower = 0.0
upper = 2.0
[experiment]
horizon = 400
replications = 5
seed = 11
initial_input = 1.5
[[policies]]
kind = "oracle"
[[policies]]
kind = "mspsa"
sigma_lower = 1.0
[[policies]]
kind = "greedy_lse"
"#;

    #[test]
    fn oracle_has_zero_regret_and_others_do_not() {
        let cfg = ExperimentConfig::from_toml(CFG).unwrap();
        let results = simulate_policies(&cfg).unwrap();
        let last = cfg.horizon as usize - 1;
        assert_eq!(results[0].aggregate.cumulative_regret.mean(last), 0.0);
        assert!(results[1].aggregate.cumulative_regret.mean(last) > 0.0);
        assert_eq!(results[1].checkpoint_regret.len(), 5);
    }

    #[test]
    fn chunked_parallel_matches_serial_fold() {
        let cfg = ExperimentConfig::from_toml(CFG).unwrap();
        let results = simulate_policies(&cfg).unwrap();
        let optimal = OptimalInputs::compute(&cfg.model).unwrap();
        let mut agg = Aggregate::new(cfg.horizon as usize);
        for r in 0..cfg.replications {
            let (s, _) = run_replication(&cfg, &optimal, &cfg.policies[1], r).unwrap();
            agg.push(&s).unwrap();
        }
        assert_eq!(agg, results[1].aggregate);
    }

    #[test]
    fn trace_matches_replication() {
        let cfg = ExperimentConfig::from_toml(CFG).unwrap();
        let traj = trace_replication(&cfg, "mspsa", 2).unwrap();
        let optimal = OptimalInputs::compute(&cfg.model).unwrap();
        let (s, _) = run_replication(&cfg, &optimal, &cfg.policies[1], 1).unwrap();
        let from_trace = RegretSeries::from_records(1, 2, &traj.records);
        assert_eq!(from_trace.cumulative_regret, s.cumulative_regret);
        assert!(matches!(
            trace_replication(&cfg, "mspsa", 6),
            Err(ExperimentError::UnknownReplication { .. })
        ));
        assert!(matches!(
            trace_replication(&cfg, "nope", 1),
            Err(ExperimentError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn jackknife_interval_brackets_estimate() {
        let cfg = ExperimentConfig::from_toml(CFG).unwrap();
        let results = simulate_policies(&cfg).unwrap();
        let (theta, ci) = regret_exponent(&cfg, &results[1]);
        let [lo, hi] = ci.unwrap();
        let theta = theta.unwrap();
        assert!(lo <= theta && theta <= hi);
    }

    #[test]
    fn outputs_are_deterministic() {
        let cfg = ExperimentConfig::from_toml(CFG).unwrap();
        let render = || {
            let results = simulate_policies(&cfg).unwrap();
            let summary = summarize(&cfg, &results);
            render_outputs(&cfg, &results, &summary)
        };
        let a = render();
        assert_eq!(a, render());
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "oracle.csv",
                "mspsa.csv",
                "mspsa_updates.csv",
                "greedy_lse.csv",
                "greedy_lse_updates.csv",
                "summary.json",
                "summary.txt"
            ]
        );
        assert!(a[0].1.starts_with("t,mean_regret,se_regret,mean_input_mse,mean_est_mse\n1,0,0,0,0\n"));
    }
}
