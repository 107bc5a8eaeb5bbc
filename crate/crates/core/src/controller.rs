//! Event-triggered client selection with an integral threshold controller.
//!
//! Each client `i` carries a threshold `δ_i` and a low-pass filtered load `L_i`.
//! At round `k` the server fires client `i` iff `|ω^k − z_i^prev| ≥ δ_i^k`, then
//!
//! ```text
//! L_i^{k+1} = (1 − α)·L_i^k + α·S_i^k
//! δ_i^{k+1} = δ_i^k + K·(L_i^k − L̄_i)
//! ```
//!
//! The threshold update uses the load *entering* the round. With that indexing the
//! closed loop satisfies, for every horizon `T`,
//!
//! ```text
//! (1/T)·Σ_{k<T} S^k = L̄ + (δ^T − δ^0)/(K·T) + (L^T − L^0)/(α·T)
//! ```
//!
//! exactly, which [`identity_residual`] measures.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Integral gain `K > 0` and filter constant `α ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub gain: f64,
    pub alpha: f64,
}

impl ControllerGains {
    pub fn new(gain: f64, alpha: f64) -> Result<Self> {
        let gains = Self { gain, alpha };
        gains.validate()?;
        Ok(gains)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::Config(format!("control gain K must be positive, got {}", self.gain)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("filter constant alpha must lie in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { gain: 2.0, alpha: 0.9 }
    }
}

/// Distance used by the event trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Infinity,
}

impl DistanceMetric {
    pub fn distance(self, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        check_dim(a.len(), b.len())?;
        let diffs = a.iter().zip(b.iter()).map(|(x, y)| x - y);
        Ok(match self {
            DistanceMetric::Euclidean => diffs.map(|v| v * v).sum::<f64>().sqrt(),
            DistanceMetric::Infinity => diffs.map(f64::abs).fold(0.0, f64::max),
        })
    }
}

/// `S = 1` iff `|ω − z_prev| ≥ δ` in the Euclidean norm.
pub fn trigger(omega: &DVector<f64>, z_prev: &DVector<f64>, delta: f64) -> Result<bool> {
    trigger_with(DistanceMetric::Euclidean, omega, z_prev, delta)
}

pub fn trigger_with(
    metric: DistanceMetric,
    omega: &DVector<f64>,
    z_prev: &DVector<f64>,
    delta: f64,
) -> Result<bool> {
    Ok(metric.distance(omega, z_prev)? >= delta)
}

/// First-order low-pass filter on the event indicator.
pub fn filter_update(load: f64, event: bool, alpha: f64) -> f64 {
    (1.0 - alpha) * load + alpha * if event { 1.0 } else { 0.0 }
}

/// Integral law; `load` is the value entering the round, not the filtered output.
pub fn threshold_update(delta: f64, load: f64, target: f64, gain: f64) -> f64 {
    delta + gain * (load - target)
}

/// Per-client controller state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientController {
    pub delta: f64,
    pub load: f64,
    pub target: f64,
    pub delta0: f64,
    pub load0: f64,
    pub cumulative_events: u64,
    pub rounds_elapsed: usize,
    pub last_event_round: Option<usize>,
    /// When set, the threshold never moves (the load filter still runs).
    pub pinned: bool,
}

impl ClientController {
    pub fn new(target: f64, delta0: f64, load0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!("target load must lie in [0,1], got {target}")));
        }
        if !(0.0..=1.0).contains(&load0) {
            return Err(Error::Config(format!("initial load must lie in [0,1], got {load0}")));
        }
        if !delta0.is_finite() {
            return Err(Error::Config("initial threshold must be finite".into()));
        }
        if target == 0.0 {
            log::warn!("target load 0: the client may stop participating permanently");
        }
        Ok(Self {
            delta: delta0,
            load: load0,
            target,
            delta0,
            load0,
            cumulative_events: 0,
            rounds_elapsed: 0,
            last_event_round: None,
            pinned: false,
        })
    }

    /// A controller whose threshold stays at `delta` forever.
    pub fn pinned(delta: f64, load0: f64) -> Result<Self> {
        let mut c = Self::new(1.0, delta, load0)?;
        c.pinned = true;
        Ok(c)
    }

    /// Commits one round's event and advances the filter and the threshold.
    pub fn observe(&mut self, event: bool, gains: &ControllerGains) {
        let load_in = self.load;
        self.load = filter_update(load_in, event, gains.alpha);
        if !self.pinned {
            self.delta = threshold_update(self.delta, load_in, self.target, gains.gain);
        }
        if event {
            self.cumulative_events += 1;
            self.last_event_round = Some(self.rounds_elapsed);
        }
        self.rounds_elapsed += 1;
    }

    /// Residual of the exact participation identity after `rounds` rounds.
    pub fn participation_identity_residual(&self, gains: &ControllerGains, rounds: usize) -> Result<f64> {
        if rounds == 0 {
            return Err(Error::contract("identity needs at least one completed round"));
        }
        if rounds != self.rounds_elapsed {
            return Err(Error::contract(format!(
                "controller has completed {} rounds, not {rounds}",
                self.rounds_elapsed
            )));
        }
        Ok(identity_residual(
            self.cumulative_events,
            rounds,
            IdentityEndpoints {
                delta0: self.delta0,
                load0: self.load0,
                delta: self.delta,
                load: self.load,
            },
            self.target,
            gains,
        ))
    }

    /// True iff the client fired within the last `window` completed rounds.
    pub fn liveness_check(&self, window: usize) -> bool {
        match self.last_event_round {
            Some(last) => window >= 1 && self.rounds_elapsed - last <= window,
            None => false,
        }
    }
}

/// Threshold and load at the start and end of a horizon.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEndpoints {
    pub delta0: f64,
    pub load0: f64,
    pub delta: f64,
    pub load: f64,
}

/// `|(1/T)·ΣS − L̄ − (δ^T − δ^0)/(K·T) − (L^T − L^0)/(α·T)|`.
pub fn identity_residual(
    events: u64,
    rounds: usize,
    ends: IdentityEndpoints,
    target: f64,
    gains: &ControllerGains,
) -> f64 {
    let t = rounds as f64;
    let rate = events as f64 / t;
    let predicted = target
        + (ends.delta - ends.delta0) / (gains.gain * t)
        + (ends.load - ends.load0) / (gains.alpha * t);
    (rate - predicted).abs()
}

/// Interval that must contain every threshold of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdBounds {
    pub lower: f64,
    pub upper: f64,
}

impl ThresholdBounds {
    pub fn contains(&self, delta: f64, slack: f64) -> bool {
        delta >= self.lower - slack && delta <= self.upper + slack
    }
}

/// Bounds on `δ_i^k` given `δ^0`, the gains, and a trigger-distance supremum
/// `delta_plus` (any threshold above it never fires).
pub fn threshold_bounds(delta0: f64, gains: &ControllerGains, delta_plus: f64) -> ThresholdBounds {
    debug_assert!(delta_plus >= 0.0);
    let k = gains.gain;
    let a = gains.alpha;
    let swing = k * (1.0 + a) / a;
    ThresholdBounds {
        lower: (delta0 - k / a).min(-swing),
        upper: (delta_plus + swing).max(delta0 + k / a),
    }
}

/// Constants `(c₁, c₂)` with `c₁/T ≤ (1/T)·ΣS − L̄ ≤ c₂/T`.
pub fn rate_bound_constants(delta0: f64, gains: &ControllerGains, delta_plus: f64) -> (f64, f64) {
    let k = gains.gain;
    let a = gains.alpha;
    let tail = (2.0 + a) / a;
    let c1 = (-2.0 / a).min(-delta0 / k - tail);
    let c2 = ((delta_plus - delta0) / k + tail).max(tail);
    (c1, c2)
}

/// Outcome of one selection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Fired clients in increasing index order.
    pub selected: Vec<usize>,
    /// Trigger distance `|ω − z_i^prev|` each client was tested against.
    pub distances: Vec<f64>,
    pub events: Vec<bool>,
}

/// Runs the selection operator over all clients in index order and commits each
/// client's controller update.
pub fn select_clients(
    controllers: &mut [ClientController],
    omega: &DVector<f64>,
    z_cache: &[DVector<f64>],
    gains: &ControllerGains,
    metric: DistanceMetric,
) -> Result<Selection> {
    if controllers.len() != z_cache.len() {
        return Err(Error::contract(format!(
            "{} controllers but {} cached uploads",
            controllers.len(),
            z_cache.len()
        )));
    }
    let mut selection = Selection {
        selected: Vec::new(),
        distances: Vec::with_capacity(controllers.len()),
        events: Vec::with_capacity(controllers.len()),
    };
    for (i, (ctrl, z)) in controllers.iter_mut().zip(z_cache).enumerate() {
        let distance = metric.distance(omega, z)?;
        let event = distance >= ctrl.delta;
        if event {
            selection.selected.push(i);
        }
        ctrl.observe(event, gains);
        selection.distances.push(distance);
        selection.events.push(event);
    }
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn trigger_examples() {
        assert!(trigger(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), 0.0).unwrap());
        assert!(trigger(&v(&[0.5]), &v(&[0.0]), 0.5).unwrap());
        assert!(!trigger(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), 0.1).unwrap());
        assert!(trigger(&v(&[0.0]), &v(&[0.0]), -1.0).unwrap());
        assert!(trigger(&v(&[0.0]), &v(&[0.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn infinity_metric() {
        let d = DistanceMetric::Infinity.distance(&v(&[3.0, -1.0]), &v(&[0.0, 3.0])).unwrap();
        assert_eq!(d, 4.0);
        let e = DistanceMetric::Euclidean.distance(&v(&[3.0, -1.0]), &v(&[0.0, 3.0])).unwrap();
        assert_eq!(e, 5.0);
    }

    #[test]
    fn filter_examples() {
        assert_relative_eq!(filter_update(0.0, true, 0.9), 0.9);
        assert_eq!(filter_update(1.0, true, 0.3), 1.0);
        assert_relative_eq!(filter_update(0.5, false, 0.9), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn threshold_examples() {
        assert_relative_eq!(threshold_update(0.0, 1.0, 0.1, 2.0), 1.8);
        assert_eq!(threshold_update(0.7, 0.25, 0.25, 3.0), 0.7);
        assert_relative_eq!(threshold_update(1.0, 0.0, 0.2, 5.0), 0.0);
    }

    #[test]
    fn gains_validation() {
        assert!(ControllerGains::new(0.0, 0.5).is_err());
        assert!(ControllerGains::new(1.0, 1.0).is_err());
        assert!(ControllerGains::new(1.0, 0.0).is_err());
        assert!(ControllerGains::new(2.0, 0.9).is_ok());
    }

    #[test]
    fn first_round_fires_everyone() {
        let gains = ControllerGains::default();
        let mut ctrls: Vec<_> = (0..5).map(|_| ClientController::new(0.1, 0.0, 0.0).unwrap()).collect();
        let omega = v(&[1.0, 1.0]);
        let cache = vec![omega.clone(); 5];
        let sel = select_clients(&mut ctrls, &omega, &cache, &gains, DistanceMetric::Euclidean).unwrap();
        assert_eq!(sel.selected, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn quiet_when_thresholds_positive() {
        let gains = ControllerGains::default();
        let mut ctrls: Vec<_> = (0..3).map(|_| ClientController::new(0.1, 0.5, 0.0).unwrap()).collect();
        let omega = v(&[0.0]);
        let cache = vec![omega.clone(); 3];
        let sel = select_clients(&mut ctrls, &omega, &cache, &gains, DistanceMetric::Euclidean).unwrap();
        assert!(sel.selected.is_empty());
        assert!(ctrls.iter().all(|c| c.rounds_elapsed == 1 && c.cumulative_events == 0));
    }

    #[test]
    fn select_rejects_mismatched_lengths() {
        let gains = ControllerGains::default();
        let mut ctrls = vec![ClientController::new(0.1, 0.0, 0.0).unwrap()];
        let omega = v(&[0.0]);
        assert!(select_clients(&mut ctrls, &omega, &[], &gains, DistanceMetric::Euclidean).is_err());
    }

    #[test]
    fn one_step_identity_by_hand() {
        // S⁰ = 1, L⁰ = 0, δ⁰ = 0, K = 2, α = 0.9, L̄ = 0.1
        // δ¹ = 2(0 − 0.1) = −0.2, L¹ = 0.9
        // rhs = 0.1 + (−0.2)/2 + 0.9/0.9 = 1 = lhs
        let gains = ControllerGains::new(2.0, 0.9).unwrap();
        let mut c = ClientController::new(0.1, 0.0, 0.0).unwrap();
        c.observe(true, &gains);
        assert_relative_eq!(c.delta, -0.2, epsilon = 1e-15);
        assert_relative_eq!(c.load, 0.9, epsilon = 1e-15);
        assert!(c.participation_identity_residual(&gains, 1).unwrap() <= 1e-15);
    }

    #[test]
    fn quiet_run_identity() {
        let gains = ControllerGains::default();
        let mut c = ClientController::new(0.3, 100.0, 0.0).unwrap();
        for _ in 0..20 {
            c.observe(false, &gains);
        }
        assert!(c.participation_identity_residual(&gains, 20).unwrap() <= 1e-12);
    }

    #[test]
    fn identity_needs_completed_rounds() {
        let gains = ControllerGains::default();
        let c = ClientController::new(0.3, 0.0, 0.0).unwrap();
        assert!(c.participation_identity_residual(&gains, 0).is_err());
        assert!(c.participation_identity_residual(&gains, 3).is_err());
    }

    #[test]
    fn threshold_bound_examples() {
        let gains = ControllerGains::new(2.0, 0.9).unwrap();
        let b = threshold_bounds(0.0, &gains, 5.0);
        let swing = 2.0 * 1.9 / 0.9;
        assert_relative_eq!(b.lower, -swing, epsilon = 1e-12);
        assert_relative_eq!(b.upper, 5.0 + swing, epsilon = 1e-12);
        assert_relative_eq!(b.lower, -4.222_222_222_222_222, epsilon = 1e-12);
        assert_relative_eq!(b.upper, 9.222_222_222_222_221, epsilon = 1e-12);

        let tiny = ControllerGains::new(1e-12, 0.9).unwrap();
        let b = threshold_bounds(0.0, &tiny, 3.0);
        assert!(b.lower.abs() < 1e-9 && (b.upper - 3.0).abs() < 1e-9);
    }

    #[test]
    fn liveness_examples() {
        let gains = ControllerGains::default();
        let mut c = ClientController::new(0.1, 0.0, 0.0).unwrap();
        for k in 0..10 {
            c.observe(k == 9, &gains);
        }
        assert!(c.liveness_check(1));
        let mut quiet = ClientController::new(0.1, 0.0, 0.0).unwrap();
        for _ in 0..10 {
            quiet.observe(false, &gains);
        }
        assert!(!quiet.liveness_check(5));
        let mut early = ClientController::new(0.1, 0.0, 0.0).unwrap();
        for k in 0..10 {
            early.observe(k == 0, &gains);
        }
        assert!(!early.liveness_check(5));
        assert!(early.liveness_check(10));
    }

    #[test]
    fn pinned_threshold_never_moves() {
        let gains = ControllerGains::default();
        let mut c = ClientController::pinned(0.0, 0.0).unwrap();
        for k in 0..50 {
            c.observe(k % 3 == 0, &gains);
            assert_eq!(c.delta, 0.0);
        }
    }

    /// Scalar closed loop with the trigger distance held at 1.
    #[test]
    fn scalar_loop_tracks_target_within_rate_bound() {
        let gains = ControllerGains::new(2.0, 0.9).unwrap();
        let target = 0.5;
        let rounds = 1000;
        let distance = 1.0;
        let mut c = ClientController::new(target, 0.0, 0.0).unwrap();
        let bounds = threshold_bounds(0.0, &gains, distance);
        for _ in 0..rounds {
            let event = distance >= c.delta;
            c.observe(event, &gains);
            assert!(bounds.contains(c.delta, 0.0));
        }
        let (c1, c2) = rate_bound_constants(0.0, &gains, distance);
        let err = c.cumulative_events as f64 / rounds as f64 - target;
        assert!(err >= c1 / rounds as f64 && err <= c2 / rounds as f64, "err {err}");
        assert!(c.participation_identity_residual(&gains, rounds).unwrap() <= 1e-9);
    }

    proptest! {
        #[test]
        fn load_stays_in_unit_interval(
            events in proptest::collection::vec(any::<bool>(), 1..300),
            alpha in 0.01f64..0.99,
            load0 in 0.0f64..=1.0,
        ) {
            let gains = ControllerGains::new(1.0, alpha).unwrap();
            let mut c = ClientController::new(0.2, 0.0, load0).unwrap();
            for e in events {
                c.observe(e, &gains);
                prop_assert!((0.0..=1.0).contains(&c.load));
            }
        }

        #[test]
        fn identity_holds_for_every_prefix(
            distances in proptest::collection::vec(0.0f64..5.0, 1..400),
            gain in 0.1f64..6.0,
            alpha in 0.05f64..0.95,
            target in 0.01f64..=1.0,
            delta0 in -3.0f64..3.0,
        ) {
            let gains = ControllerGains::new(gain, alpha).unwrap();
            let mut c = ClientController::new(target, delta0, 0.0).unwrap();
            let sup = distances.iter().copied().fold(0.0, f64::max);
            let bounds = threshold_bounds(delta0, &gains, sup);
            for (t, d) in distances.iter().enumerate() {
                let event = *d >= c.delta;
                c.observe(event, &gains);
                prop_assert!(c.participation_identity_residual(&gains, t + 1).unwrap() <= 1e-9);
                prop_assert!(bounds.contains(c.delta, 1e-9));
            }
        }

        #[test]
        fn trajectories_are_deterministic(
            distances in proptest::collection::vec(0.0f64..5.0, 1..100),
        ) {
            let gains = ControllerGains::default();
            let run = || {
                let mut c = ClientController::new(0.2, 0.0, 0.0).unwrap();
                let mut trail = Vec::new();
                for d in &distances {
                    let e = *d >= c.delta;
                    c.observe(e, &gains);
                    trail.push((c.delta.to_bits(), c.load.to_bits()));
                }
                trail
            };
            prop_assert_eq!(run(), run());
        }
    }
}
