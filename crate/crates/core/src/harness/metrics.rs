//! Reductions over a finished trace.
//!
//! Everything here reads only the trace plus the handful of run constants in
//! [`ReportContext`], so a report can be recomputed from a trace file alone.

use serde::{Deserialize, Serialize};

use super::trace::RoundTrace;
use crate::controller::{self, ControllerGains, IdentityEndpoints};
use crate::engine::RunConfig;
use crate::error::{Error, Result};

/// Slack allowed on the threshold interval check; thresholds are sums of
/// `K·(L − L̄)` increments and pick up a few ulps of rounding.
pub const BOUND_SLACK: f64 = 1e-9;

/// Quantity compared against the efficiency target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum TargetMetric {
    /// `Σf_i(ω) − f*`
    LossGap { optimum: f64 },
    GradNorm,
}

impl TargetMetric {
    pub fn value(&self, r: &RoundTrace) -> f64 {
        match *self {
            TargetMetric::LossGap { optimum } => r.f_omega - optimum,
            TargetMetric::GradNorm => r.grad_norm_global,
        }
    }
}

/// Cumulative events at the first round whose metric is at or below `target`.
pub fn events_to_target(trace: &[RoundTrace], metric: TargetMetric, target: f64) -> Option<u64> {
    trace
        .iter()
        .find(|r| metric.value(r) <= target)
        .map(|r| r.cumulative_events)
}

/// Fraction of rounds in which `client` fired. Needs per-client records.
pub fn realized_rate(trace: &[RoundTrace], client: usize) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::contract("empty trace"));
    }
    let mut events = 0u64;
    for r in trace {
        let c = r.clients.get(client).ok_or_else(|| {
            Error::contract(format!("round {} has no record for client {client}", r.round))
        })?;
        events += u64::from(c.event);
    }
    Ok(events as f64 / trace.len() as f64)
}

/// `cumulative_events / (T·N)`; does not need per-client records.
pub fn network_rate(trace: &[RoundTrace], clients: usize) -> Result<f64> {
    match trace.last() {
        Some(last) if clients > 0 => Ok(last.cumulative_events as f64 / (trace.len() * clients) as f64),
        _ => Err(Error::contract("network rate needs a nonempty trace and clients > 0")),
    }
}

/// Empirical `δ̂₊` for one client: the largest trigger distance it saw.
pub fn delta_plus(trace: &[RoundTrace], client: usize) -> f64 {
    trace
        .iter()
        .filter_map(|r| r.clients.get(client))
        .map(|c| c.distance)
        .fold(0.0, f64::max)
}

/// Longest run of consecutive rounds with `round >= from` in which `client`
/// did not fire, including a trailing stretch at the end of the trace.
pub fn max_quiet_stretch(trace: &[RoundTrace], client: usize, from: usize) -> usize {
    let mut longest = 0;
    let mut current = 0;
    for r in trace.iter().filter(|r| r.round >= from) {
        if r.clients.get(client).is_some_and(|c| c.event) {
            current = 0;
        } else {
            current += 1;
            longest = longest.max(current);
        }
    }
    longest
}

/// Population standard deviation of `Σf_i(ω^k)` over the last `window` rounds.
pub fn loss_std(trace: &[RoundTrace], window: usize) -> Result<f64> {
    if window == 0 || trace.len() < window {
        return Err(Error::contract(format!(
            "loss window {window} needs at least that many rounds, trace has {}",
            trace.len()
        )));
    }
    let tail = &trace[trace.len() - window..];
    let n = window as f64;
    let mean = tail.iter().map(|r| r.f_omega).sum::<f64>() / n;
    let var = tail.iter().map(|r| (r.f_omega - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Run constants a report needs beyond the trace itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub clients: usize,
    pub targets: Vec<f64>,
    pub gains: ControllerGains,
    pub delta0: f64,
    pub load0: f64,
    /// False for the sampling baselines, whose traces carry no controller state.
    pub controlled: bool,
    pub metric: TargetMetric,
    pub target: f64,
}

pub const DEFAULT_LOSS_TARGET: f64 = 1e-3;

impl ReportContext {
    /// Loss-gap target against `optimal_loss` when known, gradient norm otherwise.
    pub fn from_config(cfg: &RunConfig, optimal_loss: Option<f64>) -> Self {
        let (metric, target) = match optimal_loss {
            Some(optimum) => (TargetMetric::LossGap { optimum }, DEFAULT_LOSS_TARGET),
            None => (TargetMetric::GradNorm, DEFAULT_LOSS_TARGET),
        };
        Self {
            clients: cfg.clients,
            targets: cfg.target_loads(),
            gains: cfg.gains,
            delta0: cfg.delta0,
            load0: cfg.load0,
            controlled: cfg.algorithm.uses_controller() && !cfg.pin_threshold,
            metric,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalResiduals {
    pub grad_norm_global: f64,
    pub lagrangian: f64,
    pub f_theta: f64,
    pub f_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rounds: usize,
    pub total_events: u64,
    pub events_to_target: Option<u64>,
    pub metric: TargetMetric,
    pub target: f64,
    pub network_rate: f64,
    /// Empty when the trace has no per-client records.
    pub client_rates: Vec<f64>,
    pub identity_max_residual: Option<f64>,
    pub delta_bound_violations: Option<usize>,
    /// Clients whose realized rate falls outside `L̄_i ± max(|c₁|, c₂)/T`.
    pub rate_bound_violations: Option<usize>,
    pub final_residuals: FinalResiduals,
}

/// Largest identity residual over every client and every prefix.
pub fn identity_max_residual(trace: &[RoundTrace], ctx: &ReportContext) -> Result<f64> {
    per_client(trace, ctx)?;
    let mut worst = 0.0f64;
    for i in 0..ctx.clients {
        let mut events = 0u64;
        for (t, r) in trace.iter().enumerate() {
            let c = &r.clients[i];
            events += u64::from(c.event);
            let ends = IdentityEndpoints {
                delta0: ctx.delta0,
                load0: ctx.load0,
                delta: c.delta,
                load: c.load,
            };
            worst = worst.max(controller::identity_residual(events, t + 1, ends, ctx.targets[i], &ctx.gains));
        }
    }
    Ok(worst)
}

/// Number of (client, round) thresholds outside the interval built from that
/// client's empirical `δ̂₊`.
pub fn delta_bound_violations(trace: &[RoundTrace], ctx: &ReportContext) -> Result<usize> {
    per_client(trace, ctx)?;
    let mut count = 0;
    for i in 0..ctx.clients {
        let bounds = controller::threshold_bounds(ctx.delta0, &ctx.gains, delta_plus(trace, i));
        count += trace
            .iter()
            .filter(|r| !bounds.contains(r.clients[i].delta, BOUND_SLACK))
            .count();
    }
    Ok(count)
}

/// Number of clients whose realized rate misses `L̄_i` by more than the
/// `max(|c₁|, c₂)/T` envelope.
pub fn rate_bound_violations(trace: &[RoundTrace], ctx: &ReportContext) -> Result<usize> {
    per_client(trace, ctx)?;
    let t = trace.len() as f64;
    let mut count = 0;
    for i in 0..ctx.clients {
        let (c1, c2) = controller::rate_bound_constants(ctx.delta0, &ctx.gains, delta_plus(trace, i));
        let gap = (realized_rate(trace, i)? - ctx.targets[i]).abs();
        if gap > c1.abs().max(c2) / t {
            count += 1;
        }
    }
    Ok(count)
}

fn per_client(trace: &[RoundTrace], ctx: &ReportContext) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::contract("empty trace"));
    }
    if ctx.targets.len() != ctx.clients {
        return Err(Error::contract("one target per client required"));
    }
    if let Some(r) = trace.iter().find(|r| r.clients.len() != ctx.clients) {
        return Err(Error::contract(format!(
            "round {} has {} client records, expected {}",
            r.round,
            r.clients.len(),
            ctx.clients
        )));
    }
    Ok(())
}

pub fn report(trace: &[RoundTrace], ctx: &ReportContext) -> Result<ExperimentReport> {
    let last = trace.last().ok_or_else(|| Error::contract("empty trace"))?;
    let recorded = trace.iter().all(|r| r.clients.len() == ctx.clients);
    let client_rates = if recorded {
        (0..ctx.clients).map(|i| realized_rate(trace, i)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let controlled = ctx.controlled && recorded;
    Ok(ExperimentReport {
        rounds: trace.len(),
        total_events: last.cumulative_events,
        events_to_target: events_to_target(trace, ctx.metric, ctx.target),
        metric: ctx.metric,
        target: ctx.target,
        network_rate: network_rate(trace, ctx.clients)?,
        client_rates,
        identity_max_residual: controlled.then(|| identity_max_residual(trace, ctx)).transpose()?,
        delta_bound_violations: controlled.then(|| delta_bound_violations(trace, ctx)).transpose()?,
        rate_bound_violations: controlled.then(|| rate_bound_violations(trace, ctx)).transpose()?,
        final_residuals: FinalResiduals {
            grad_norm_global: last.grad_norm_global,
            lagrangian: last.lagrangian,
            f_theta: last.f_theta,
            f_omega: last.f_omega,
        },
    })
}

/// Tolerance on the identity residual accepted by [`validate_trace`].
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Checks the structural invariants of a trace, plus the controller identity
/// and threshold bounds when `ctx.controlled`. Returns one message per failure.
pub fn validate_trace(trace: &[RoundTrace], ctx: &ReportContext) -> Vec<String> {
    let mut problems = Vec::new();
    let mut cumulative = 0u64;
    for (k, r) in trace.iter().enumerate() {
        if r.round != k {
            problems.push(format!("row {k}: round index {} out of sequence", r.round));
        }
        if r.selected.len() != r.selected_count {
            problems.push(format!(
                "round {}: selected_count {} but {} indices listed",
                r.round,
                r.selected_count,
                r.selected.len()
            ));
        }
        if r.selected.windows(2).any(|w| w[0] >= w[1]) || r.selected.iter().any(|&i| i >= ctx.clients) {
            problems.push(format!("round {}: selected set is not sorted distinct client indices", r.round));
        }
        if !r.clients.is_empty() {
            if r.clients.len() != ctx.clients {
                problems.push(format!("round {}: {} client records", r.round, r.clients.len()));
            }
            let fired = r.clients.iter().filter(|c| c.event).count();
            if fired != r.selected_count {
                problems.push(format!(
                    "round {}: {fired} event flags but selected_count {}",
                    r.round, r.selected_count
                ));
            }
            if r.selected.iter().any(|&i| !r.clients.get(i).is_some_and(|c| c.event)) {
                problems.push(format!("round {}: selected client without event flag", r.round));
            }
            if r.clients.iter().any(|c| !(0.0..=1.0).contains(&c.load)) {
                problems.push(format!("round {}: load outside [0,1]", r.round));
            }
        }
        cumulative += r.selected_count as u64;
        if r.cumulative_events != cumulative {
            problems.push(format!(
                "round {}: cumulative_events {} but selected counts sum to {cumulative}",
                r.round, r.cumulative_events
            ));
        }
    }
    if ctx.controlled && !trace.is_empty() {
        match identity_max_residual(trace, ctx) {
            Ok(res) if res > IDENTITY_TOLERANCE => {
                problems.push(format!("participation identity residual {res:e} exceeds {IDENTITY_TOLERANCE:e}"))
            }
            Ok(_) => {}
            Err(e) => problems.push(e.to_string()),
        }
        match delta_bound_violations(trace, ctx) {
            Ok(0) => {}
            Ok(n) => problems.push(format!("{n} thresholds outside their bounds")),
            Err(e) => problems.push(e.to_string()),
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{filter_update, threshold_update};
    use crate::harness::trace::ClientSample;

    fn ctx(clients: usize, target: f64) -> ReportContext {
        ReportContext {
            clients,
            targets: vec![target; clients],
            gains: ControllerGains::default(),
            delta0: 0.0,
            load0: 0.0,
            controlled: true,
            metric: TargetMetric::GradNorm,
            target: 1e-3,
        }
    }

    /// One client driven by a fixed distance sequence through the real controller laws.
    fn scalar_trace(distances: &[f64], target: f64) -> Vec<RoundTrace> {
        let gains = ControllerGains::default();
        let (mut delta, mut load, mut cum) = (0.0, 0.0, 0u64);
        distances
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let event = d >= delta;
                delta = threshold_update(delta, load, target, gains.gain);
                load = filter_update(load, event, gains.alpha);
                cum += u64::from(event);
                RoundTrace {
                    round: k,
                    selected: if event { vec![0] } else { vec![] },
                    selected_count: usize::from(event),
                    clients: vec![ClientSample { event, load, delta, distance: d }],
                    omega_norm: 0.0,
                    grad_norm_global: 1.0 / (k + 1) as f64,
                    lagrangian: 0.0,
                    f_theta: 0.0,
                    f_omega: (k % 2) as f64,
                    cumulative_events: cum,
                }
            })
            .collect()
    }

    #[test]
    fn events_to_target_examples() {
        let trace = scalar_trace(&[1.0; 10], 0.5);
        assert_eq!(events_to_target(&trace, TargetMetric::GradNorm, 2.0), Some(trace[0].cumulative_events));
        assert_eq!(events_to_target(&trace, TargetMetric::GradNorm, 0.25), Some(trace[3].cumulative_events));
        assert_eq!(events_to_target(&trace, TargetMetric::GradNorm, 1e-3), None);
        let gap = TargetMetric::LossGap { optimum: 1.0 };
        assert_eq!(events_to_target(&trace, gap, 0.0), Some(trace[0].cumulative_events));
    }

    #[test]
    fn realized_rate_extremes() {
        let forced = |event: bool| {
            let mut t = scalar_trace(&[0.0; 20], 0.5);
            for r in &mut t {
                r.clients[0].event = event;
            }
            t
        };
        assert_eq!(realized_rate(&forced(true), 0).unwrap(), 1.0);
        let never = forced(false);
        assert_eq!(realized_rate(&never, 0).unwrap(), 0.0);
        assert!(realized_rate(&never, 1).is_err());
        assert!(realized_rate(&[], 0).is_err());
    }

    #[test]
    fn controlled_scalar_trace_validates() {
        let d: Vec<f64> = (0..400).map(|k| ((k * 37) % 11) as f64 / 3.0).collect();
        let trace = scalar_trace(&d, 0.3);
        let c = ctx(1, 0.3);
        assert!(validate_trace(&trace, &c).is_empty(), "{:?}", validate_trace(&trace, &c));
        let rep = report(&trace, &c).unwrap();
        assert!(rep.identity_max_residual.unwrap() <= 1e-12);
        assert_eq!(rep.delta_bound_violations, Some(0));
        assert_eq!(rep.rate_bound_violations, Some(0));
        assert_eq!(rep.total_events, trace.last().unwrap().cumulative_events);
        assert_eq!(rep.client_rates[0], rep.network_rate);
    }

    #[test]
    fn validation_flags_tampering() {
        let d: Vec<f64> = (0..50).map(|k| (k % 5) as f64).collect();
        let mut trace = scalar_trace(&d, 0.3);
        let c = ctx(1, 0.3);
        trace[10].cumulative_events += 1;
        assert!(!validate_trace(&trace, &c).is_empty());

        let mut trace = scalar_trace(&d, 0.3);
        let k = trace.iter().position(|r| !r.clients[0].event).unwrap();
        trace[k].clients[0].event = true;
        let problems = validate_trace(&trace, &c);
        assert!(problems.iter().any(|p| p.contains("event flags")), "{problems:?}");

        let mut trace = scalar_trace(&d, 0.3);
        trace[20].clients[0].delta += 1e-6;
        assert!(validate_trace(&trace, &c).iter().any(|p| p.contains("identity")));
    }

    #[test]
    fn quiet_stretch_counts_trailing_gap() {
        let trace = scalar_trace(&[f64::INFINITY; 10], 0.5);
        assert_eq!(max_quiet_stretch(&trace, 0, 0), 0);
        let mut d = vec![f64::INFINITY; 10];
        d[3] = -1.0;
        d[4] = -1.0;
        d[9] = -1.0;
        let trace = scalar_trace(&d, 0.5);
        assert_eq!(max_quiet_stretch(&trace, 0, 0), 2);
        assert_eq!(max_quiet_stretch(&trace, 0, 5), 1);
        assert_eq!(max_quiet_stretch(&trace, 0, 10), 0);
    }

    #[test]
    fn loss_std_of_alternating_sequence() {
        let trace = scalar_trace(&[1.0; 10], 0.5);
        assert_eq!(loss_std(&trace, 10).unwrap(), 0.5);
        assert_eq!(loss_std(&trace, 1).unwrap(), 0.0);
        assert!(loss_std(&trace, 11).is_err());
    }

    #[test]
    fn baseline_report_omits_controller_fields() {
        let mut trace = scalar_trace(&[1.0; 10], 0.5);
        for r in &mut trace {
            r.clients.clear();
        }
        let mut c = ctx(1, 0.5);
        c.controlled = false;
        let rep = report(&trace, &c).unwrap();
        assert!(rep.identity_max_residual.is_none() && rep.delta_bound_violations.is_none());
        assert!(rep.client_rates.is_empty());
        assert_eq!(rep.network_rate, trace[9].cumulative_events as f64 / 10.0);
        assert!(validate_trace(&trace, &c).is_empty());
    }

    #[test]
    fn report_is_deterministic() {
        let d: Vec<f64> = (0..100).map(|k| (k as f64).sin().abs()).collect();
        let trace = scalar_trace(&d, 0.2);
        assert_eq!(report(&trace, &ctx(1, 0.2)).unwrap(), report(&trace, &ctx(1, 0.2)).unwrap());
    }
}
