use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mjspsa::harness::{load_config, run_experiment, trace_replication, ExperimentConfig, Overrides};
use mjspsa::model::{max_symmetric_eigenvalue, Objective};
use mjspsa::oracle::{optimal_input_qr, optimal_input_rm, stage_cost_qr, stage_cost_rm};

#[derive(Parser)]
#[command(name = "mjspsa", version, about = "Online learning for Markov jump affine systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy and write curves and summaries.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Parse and validate a config; prints OK on success.
    Validate { config: PathBuf },
    /// Write the per-period trace of one replication as CSV.
    Trace {
        config: PathBuf,
        /// One-based replication index.
        #[arg(long, default_value_t = 1)]
        replication: u64,
        /// Policy name; defaults to the first configured policy.
        #[arg(long)]
        policy: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Print the known-model optimal input for a one-based state.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        state: usize,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    replications: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl OverrideArgs {
    fn apply(self, config: ExperimentConfig) -> Result<ExperimentConfig, String> {
        let o = Overrides {
            seed: self.seed,
            horizon: self.horizon,
            replications: self.replications,
            output_dir: self.out_dir,
        };
        if o == Overrides::default() {
            return Ok(config);
        }
        config.with_overrides(&o).map_err(|e| e.to_string())
    }
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, String> {
    load_config(path).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Validate { config } => {
            load(&config)?;
            println!("OK");
        }
        Command::Run { config, overrides } => {
            let cfg = overrides.apply(load(&config)?)?;
            let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
            print!("{}", outcome.summary.to_text());
            println!();
            println!("wrote {} files to {}", outcome.files.len(), outcome.output_dir.display());
        }
        Command::Trace {
            config,
            replication,
            policy,
            output,
            overrides,
        } => {
            let cfg = overrides.apply(load(&config)?)?;
            let name = policy.unwrap_or_else(|| cfg.policies[0].name().to_string());
            let traj = trace_replication(&cfg, &name, replication).map_err(|e| e.to_string())?;
            let written = match &output {
                Some(path) => {
                    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
                    let mut w = BufWriter::new(file);
                    traj.write_csv(&mut w).and_then(|_| w.flush())
                }
                None => {
                    let stdout = io::stdout();
                    let mut w = BufWriter::new(stdout.lock());
                    traj.write_csv(&mut w).and_then(|_| w.flush())
                }
            };
            written.map_err(|e| e.to_string())?;
        }
        Command::Oracle { config, state } => {
            let cfg = load(&config)?;
            let k = cfg.model.state_count();
            if state == 0 || state > k {
                return Err(format!("state must be in 1..={k}"));
            }
            let i = state - 1;
            let model = &cfg.model;
            let fmt = |x: &mjspsa::nalgebra::DVector<f64>| {
                let coords: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                format!("[{}]", coords.join(", "))
            };
            if let Objective::QuadraticRegulation { .. } = model.objective {
                let x = optimal_input_qr(model, i).map_err(|e| e.to_string())?;
                let cost = stage_cost_qr(model, i, &x).map_err(|e| e.to_string())?;
                println!("quadratic x* = {}", fmt(&x));
                println!("quadratic expected stage cost {cost}");
                println!("quadratic x* inside box: {}", cfg.feasible.contains(&x));
            }
            // Revenue maximization applies whenever every gain is square
            // with a negative definite symmetric part.
            let revenue_ok = model
                .states
                .iter()
                .all(|s| s.gain.is_square() && max_symmetric_eigenvalue(&s.gain) < 0.0);
            if revenue_ok {
                let x = optimal_input_rm(model, i).map_err(|e| e.to_string())?;
                let cost = stage_cost_rm(model, i, &x).map_err(|e| e.to_string())?;
                println!("revenue x* = {}", fmt(&x));
                println!("revenue expected stage cost {cost}");
                println!("revenue x* inside box: {}", cfg.feasible.contains(&x));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
