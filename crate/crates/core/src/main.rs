use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fedback::engine::{Algorithm, RunConfig};
use fedback::harness::{self, config::Overrides};

#[derive(Parser)]
#[command(name = "fedback", version, about = "Event-triggered federated ADMM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
    },
    /// Repeat one experiment over a grid of target loads.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        /// Comma-separated target loads.
        #[arg(long, value_delimiter = ',', default_values_t = harness::SWEEP_TARGETS)]
        targets: Vec<f64>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// FedBack against a sampling baseline with matched seed and rho.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Baseline algorithm.
        #[arg(long)]
        algorithm: Algorithm,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the invariants of a finished trace.
    Validate {
        #[arg(long)]
        trace: PathBuf,
        /// Config the trace was produced with; defaults to config.toml next to the trace.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    target_load: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Omit per-client columns from the trace.
    #[arg(long)]
    no_client_columns: bool,
}

impl Common {
    fn resolve(&self, algorithm: Option<Algorithm>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => harness::config::load_config(p)?,
            None => RunConfig::default(),
        };
        let overrides = Overrides {
            algorithm,
            seed,
            rounds: self.rounds,
            clients: self.clients,
            target_load: self.target_load,
            rho: self.rho,
            gain: self.gain,
            alpha: self.alpha,
            record_clients: self.no_client_columns.then_some(false),
        };
        Ok(overrides.apply(base)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            common,
            seed,
            algorithm,
            out,
        } => {
            let cfg = common.resolve(algorithm, seed)?;
            let summary = harness::run_command(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sweep {
            common,
            seed,
            algorithm,
            targets,
            out,
        } => {
            let cfg = common.resolve(algorithm, seed)?;
            for s in harness::sweep_command(&cfg, &targets, &out)? {
                println!(
                    "L̄={:<5} rate={:.4} events={} events_to_target={}",
                    s.target_load,
                    s.report.network_rate,
                    s.report.total_events,
                    s.report.events_to_target.map_or("n/a".into(), |e| e.to_string())
                );
            }
        }
        Command::Compare {
            common,
            seed,
            algorithm,
            out,
        } => {
            if algorithm == Algorithm::FedBack {
                bail!("--algorithm names the baseline and must not be fedback");
            }
            let cfg = common.resolve(None, Some(seed))?;
            let cmp = harness::compare_command(&cfg, algorithm, &out)?;
            println!("{}", serde_json::to_string_pretty(&cmp)?);
        }
        Command::Validate { trace, config } => {
            let config = config.or_else(|| trace.parent().map(|d| d.join(harness::CONFIG_FILE)));
            let cfg = match config.filter(|p| p.exists()) {
                Some(p) => harness::config::load_config(&p).with_context(|| format!("loading {}", p.display()))?,
                None => {
                    log::warn!("no config found; validating against defaults");
                    RunConfig::default()
                }
            };
            let problems = harness::validate_command(&trace, &cfg)?;
            if problems.is_empty() {
                println!("ok: {}", trace.display());
            } else {
                for p in &problems {
                    println!("FAIL: {p}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
