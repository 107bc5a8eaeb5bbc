//! Experiment plumbing: configs, the `run`/`sweep`/`compare`/`validate`
//! commands, trace files and the reductions over them.
//!
//! Each run directory holds `trace.csv`, `report.json` and the resolved
//! `config.toml`, so any run can be replayed or re-reduced offline.

pub mod config;
pub mod metrics;
pub mod trace;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{build_federation, Algorithm, Engine, RunConfig};
use crate::error::{Error, Result};
use metrics::{ExperimentReport, ReportContext};
use trace::RoundTrace;

/// Target loads swept by default.
pub const SWEEP_TARGETS: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.4, 0.6];

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

/// A report plus the run identity it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub target_load: f64,
    pub rho: f64,
    /// `Σf_i(ω*)` when the federation has a closed-form optimum.
    pub optimal_loss: Option<f64>,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<RoundTrace>,
    pub summary: RunSummary,
}

/// Builds the federation, runs it and reduces the trace.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let fed = build_federation(cfg)?;
    let optimal_loss = fed.optimal_loss();
    let mut engine = Engine::new(cfg, &fed)?;
    let rho = engine.rho();
    let trace = engine.run()?;
    let report = metrics::report(&trace, &ReportContext::from_config(cfg, optimal_loss))?;
    Ok(RunOutput {
        trace,
        summary: RunSummary {
            algorithm: cfg.algorithm,
            seed: cfg.seed,
            target_load: cfg.target_load,
            rho,
            optimal_loss,
            report,
        },
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes trace, report and resolved config for one run into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    create_dir(dir)?;
    trace::emit_trace(&out.trace, &dir.join(TRACE_FILE))?;
    write_json(&dir.join(REPORT_FILE), &out.summary)?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config::render_config(cfg)?).map_err(|e| Error::io(&cfg_path, e))
}

pub fn run_command(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    let result = execute(cfg)?;
    write_run(out, cfg, &result)?;
    log::info!(
        "{} L̄={} seed={}: {} events, rate {:.4}",
        cfg.algorithm.name(),
        cfg.target_load,
        cfg.seed,
        result.summary.report.total_events,
        result.summary.report.network_rate
    );
    Ok(result.summary)
}

fn target_dir(out: &Path, target: f64) -> PathBuf {
    out.join(format!("load_{target}"))
}

/// Runs `cfg` once per target load in parallel, one subdirectory each, and
/// writes `sweep.csv` with one row per target.
pub fn sweep_command(cfg: &RunConfig, targets: &[f64], out: &Path) -> Result<Vec<RunSummary>> {
    create_dir(out)?;
    let summaries = targets
        .par_iter()
        .map(|&t| {
            let run_cfg = RunConfig {
                target_load: t,
                targets: None,
                ..cfg.clone()
            };
            run_command(&run_cfg, &target_dir(out, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["target_load", "network_rate", "total_events", "events_to_target", "final_grad_norm"])?;
    for s in &summaries {
        w.write_record([
            s.target_load.to_string(),
            s.report.network_rate.to_string(),
            s.report.total_events.to_string(),
            s.report.events_to_target.map_or_else(String::new, |e| e.to_string()),
            s.report.final_residuals.grad_norm_global.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fedback: RunSummary,
    pub baseline: RunSummary,
    /// True when FedBack reached the target with no more events than the
    /// baseline (or the baseline never reached it).
    pub fedback_no_worse: bool,
}

/// FedBack against `baseline` on the same federation, seed and `ρ`.
pub fn compare_command(cfg: &RunConfig, baseline: Algorithm, out: &Path) -> Result<Comparison> {
    if baseline == Algorithm::FedBack {
        return Err(Error::Config("compare needs a baseline other than fedback".into()));
    }
    let fed_cfg = RunConfig {
        algorithm: Algorithm::FedBack,
        ..cfg.clone()
    };
    let fedback = execute(&fed_cfg)?;
    // pin ρ so that an automatic choice cannot drift between the two runs
    let base_cfg = RunConfig {
        algorithm: baseline,
        rho: Some(fedback.summary.rho),
        ..cfg.clone()
    };
    let base = execute(&base_cfg)?;
    write_run(&out.join(Algorithm::FedBack.name()), &fed_cfg, &fedback)?;
    write_run(&out.join(baseline.name()), &base_cfg, &base)?;
    let fedback_no_worse = match (
        fedback.summary.report.events_to_target,
        base.summary.report.events_to_target,
    ) {
        (Some(a), Some(b)) => a <= b,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    let cmp = Comparison {
        fedback: fedback.summary,
        baseline: base.summary,
        fedback_no_worse,
    };
    create_dir(out)?;
    write_json(&out.join("compare.json"), &cmp)?;
    Ok(cmp)
}

/// Loads a trace and runs the invariant suite against `cfg`.
pub fn validate_command(trace_path: &Path, cfg: &RunConfig) -> Result<Vec<String>> {
    let trace = trace::load_trace(trace_path)?;
    let mut ctx = ReportContext::from_config(cfg, None);
    if trace.iter().all(|r| r.clients.is_empty()) {
        ctx.controlled = false;
    }
    Ok(metrics::validate_trace(&trace, &ctx))
}
