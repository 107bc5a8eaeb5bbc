//! Round loop for event-triggered consensus ADMM and its random-sampling variants.
//!
//! One round of the controlled algorithm:
//!
//! 1. the selection operator fires clients whose cached upload has drifted at
//!    least `δ_i` away from `ω`;
//! 2. each fired client runs `λ ← λ + θ − ω`, then an inexact proximal step
//!    anchored at `ω − λ`, and uploads `z = λ + θ`;
//! 3. clients that did not fire keep `(θ, λ)` and their stale cache entry;
//! 4. the server resets `ω` to the mean of the *whole* cache.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, SamplerSpec};
use crate::controller::{self, ClientController, ControllerGains, DistanceMetric};
use crate::data::{self, Federation, PartitionSpec, SyntheticSpec};
use crate::error::{check_dim, Error, Result};
use crate::harness::trace::{ClientSample, RoundTrace};
use crate::objectives::{Objective, ProxProblem};

/// RNG stream reserved for client sampling; data generation uses lower streams.
const SAMPLER_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    FedBack,
    FedAdmm,
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedBack => "fedback",
            Algorithm::FedAdmm => "fedadmm",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        }
    }

    pub fn uses_controller(self) -> bool {
        self == Algorithm::FedBack
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedback" => Ok(Algorithm::FedBack),
            "fedadmm" => Ok(Algorithm::FedAdmm),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub rounds: usize,
    /// Proximal weight; `None` picks the smallest value accepted by [`validate_rho`].
    pub rho: Option<f64>,
    pub validate_rho: bool,
    pub gains: ControllerGains,
    /// Uniform target load `L̄`, also the baselines' sampling rate.
    pub target_load: f64,
    /// Per-client targets; overrides `target_load` when present.
    pub targets: Option<Vec<f64>>,
    pub delta0: f64,
    pub load0: f64,
    /// Keep every threshold at `delta0` (controller bypassed).
    pub pin_threshold: bool,
    pub metric: DistanceMetric,
    /// `ε_k = epsilon0 / (k + 1)`.
    pub epsilon0: f64,
    pub seed: u64,
    /// Initial consensus point; zero when absent.
    pub z0: Option<Vec<f64>>,
    pub data: SyntheticSpec,
    pub partition: PartitionSpec,
    /// Gradient steps per FedAvg round.
    pub local_steps: usize,
    /// FedAvg step size; `1/r_i` per client when absent.
    pub local_lr: Option<f64>,
    /// FedProx proximal weight; `rho` when absent.
    pub prox_mu: Option<f64>,
    /// Record `(S_i, L_i, δ_i, distance_i)` for every client in every round.
    pub record_clients: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedBack,
            clients: 100,
            rounds: 2000,
            rho: None,
            validate_rho: true,
            gains: ControllerGains::default(),
            target_load: 0.1,
            targets: None,
            delta0: 0.0,
            load0: 0.0,
            pin_threshold: false,
            metric: DistanceMetric::Euclidean,
            epsilon0: 1e-3,
            seed: 0,
            z0: None,
            data: SyntheticSpec::default(),
            partition: PartitionSpec::default(),
            local_steps: 10,
            local_lr: None,
            prox_mu: None,
            record_clients: true,
        }
    }
}

impl RunConfig {
    /// Per-client target loads.
    pub fn target_loads(&self) -> Vec<f64> {
        self.targets
            .clone()
            .unwrap_or_else(|| vec![self.target_load; self.clients])
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        self.gains.validate()?;
        let targets = self.target_loads();
        if targets.len() != self.clients {
            return Err(Error::Config(format!(
                "{} targets given for {} clients",
                targets.len(),
                self.clients
            )));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("target load {t} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&self.load0) {
            return Err(Error::Config(format!("initial load {} outside [0,1]", self.load0)));
        }
        if !(self.epsilon0 > 0.0) {
            return Err(Error::Config("epsilon0 must be positive".into()));
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(Error::Config(format!("rho must be positive, got {rho}")));
            }
        }
        if !self.algorithm.uses_controller() && !(self.target_load > 0.0 && self.target_load <= 1.0) {
            return Err(Error::Config(format!(
                "sampling rate must lie in (0,1], got {}",
                self.target_load
            )));
        }
        if self.algorithm == Algorithm::FedAvg {
            if self.local_steps == 0 {
                return Err(Error::Config("local_steps must be at least 1".into()));
            }
            if let Some(lr) = self.local_lr {
                if !(lr > 0.0) {
                    return Err(Error::Config("local_lr must be positive".into()));
                }
            }
        }
        if let Some(mu) = self.prox_mu {
            if !(mu > 0.0) {
                return Err(Error::Config("prox_mu must be positive".into()));
            }
        }
        Ok(())
    }

    /// Inner-solver tolerance for round `k`.
    pub fn epsilon(&self, round: usize) -> f64 {
        epsilon_schedule(self.epsilon0, round)
    }
}

pub fn epsilon_schedule(epsilon0: f64, round: usize) -> f64 {
    epsilon0 / (round as f64 + 1.0)
}

/// Local primal/dual pair and the last value uploaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub z_prev_local: DVector<f64>,
}

impl ClientState {
    pub fn at(z0: &DVector<f64>) -> Self {
        Self {
            theta: z0.clone(),
            lambda: DVector::zeros(z0.len()),
            z_prev_local: z0.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub omega: DVector<f64>,
    pub z_cache: Vec<DVector<f64>>,
    pub round: usize,
}

/// Dual ascent followed by an inexact proximal primal step, warm-started at `ω`.
pub fn client_update(
    state: &ClientState,
    obj: &Objective,
    omega: &DVector<f64>,
    rho: f64,
    eps: f64,
) -> Result<ClientState> {
    check_dim(obj.dim(), omega.len())?;
    check_dim(obj.dim(), state.theta.len())?;
    let lambda = &state.lambda + &state.theta - omega;
    let prob = ProxProblem::new(omega - &lambda, rho, eps, omega.clone())?;
    let theta = obj.prox_solve(&prob)?;
    let z_prev_local = &lambda + &theta;
    Ok(ClientState {
        theta,
        lambda,
        z_prev_local,
    })
}

/// Mean of the cached uploads, summed in index order.
pub fn aggregate(z_cache: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = z_cache
        .first()
        .ok_or_else(|| Error::contract("cannot average an empty cache"))?;
    let mut sum = DVector::zeros(first.len());
    for z in z_cache {
        check_dim(first.len(), z.len())?;
        sum += z;
    }
    Ok(sum / z_cache.len() as f64)
}

/// Smallest admissible proximal weight, `max_i 3·n_i·r_i / n`.
pub fn rho_threshold(objectives: &[Objective]) -> f64 {
    let n: usize = objectives.iter().map(Objective::samples).sum();
    objectives
        .iter()
        .map(|f| 3.0 * f.samples() as f64 * f.smoothness_constant() / n as f64)
        .fold(0.0, f64::max)
}

pub fn validate_rho(rho: f64, objectives: &[Objective]) -> bool {
    !objectives.is_empty() && rho >= rho_threshold(objectives)
}

/// Convergence diagnostics at the current iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    /// `|Σ_i ∇f_i(ω)|`
    pub grad_norm_global: f64,
    /// `Σ_i f_i(θ_i) + λ_iᵀ(θ_i − ω) + (ρ/2)|θ_i − ω|²`
    pub lagrangian: f64,
    /// `F(Θ) = Σ_i f_i(θ_i)`
    pub f_theta: f64,
    /// `Σ_i f_i(ω)`
    pub f_omega: f64,
}

pub fn stationarity_residuals(
    omega: &DVector<f64>,
    clients: &[ClientState],
    objectives: &[Objective],
    rho: f64,
) -> Result<Stationarity> {
    if clients.len() != objectives.len() {
        return Err(Error::contract("client and objective counts differ"));
    }
    let mut grad = DVector::zeros(omega.len());
    let mut lagrangian = 0.0;
    let mut f_theta = 0.0;
    let mut f_omega = 0.0;
    for (c, f) in clients.iter().zip(objectives) {
        grad += f.gradient(omega)?;
        let loss = f.loss(&c.theta)?;
        let gap = &c.theta - omega;
        f_theta += loss;
        f_omega += f.loss(omega)?;
        lagrangian += loss + c.lambda.dot(&gap) + 0.5 * rho * gap.norm_squared();
    }
    Ok(Stationarity {
        grad_norm_global: grad.norm(),
        lagrangian,
        f_theta,
        f_omega,
    })
}

/// Generates the dataset and partition described by `cfg`.
pub fn build_federation(cfg: &RunConfig) -> Result<Federation> {
    let dataset = data::generate_synthetic(&cfg.data, cfg.seed)?;
    let parts = data::partition(&dataset.labels, cfg.clients, &cfg.partition, cfg.seed)?;
    Federation::from_dataset(&dataset, &parts)
}

/// Builds the federation from `cfg` and runs every round.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<RoundTrace>> {
    cfg.validate()?;
    let fed = build_federation(cfg)?;
    Engine::new(cfg, &fed)?.run()
}

/// Owns server, client and controller state for one run over a fixed federation.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    cfg: RunConfig,
    rho: f64,
    objectives: &'a [Objective],
    server: ServerState,
    clients: Vec<ClientState>,
    controllers: Vec<ClientController>,
    sampler: ChaCha8Rng,
    cumulative_events: u64,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &RunConfig, fed: &'a Federation) -> Result<Self> {
        Self::with_objectives(cfg, &fed.objectives)
    }

    pub fn with_objectives(cfg: &RunConfig, objectives: &'a [Objective]) -> Result<Self> {
        cfg.validate()?;
        if objectives.len() != cfg.clients {
            return Err(Error::Config(format!(
                "config expects {} clients, federation has {}",
                cfg.clients,
                objectives.len()
            )));
        }
        let d = objectives[0].dim();
        if let Some(f) = objectives.iter().find(|f| f.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: f.dim(),
            });
        }
        let rho = match cfg.rho {
            Some(rho) => rho,
            None => {
                let r = rho_threshold(objectives);
                if r > 0.0 {
                    r
                } else {
                    1.0
                }
            }
        };
        if cfg.validate_rho && !validate_rho(rho, objectives) {
            return Err(Error::Config(format!(
                "rho = {rho} is below the admissible minimum {}",
                rho_threshold(objectives)
            )));
        }
        let z0 = match &cfg.z0 {
            Some(z) => {
                check_dim(d, z.len())?;
                DVector::from_column_slice(z)
            }
            None => DVector::zeros(d),
        };
        let controllers = cfg
            .target_loads()
            .into_iter()
            .map(|t| {
                let mut c = ClientController::new(t, cfg.delta0, cfg.load0)?;
                c.pinned = cfg.pin_threshold;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
        sampler.set_stream(SAMPLER_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            rho,
            objectives,
            server: ServerState {
                omega: z0.clone(),
                z_cache: vec![z0.clone(); cfg.clients],
                round: 0,
            },
            clients: vec![ClientState::at(&z0); cfg.clients],
            controllers,
            sampler,
            cumulative_events: 0,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn controllers(&self) -> &[ClientController] {
        &self.controllers
    }

    pub fn objectives(&self) -> &[Objective] {
        self.objectives
    }

    pub fn stationarity(&self) -> Result<Stationarity> {
        stationarity_residuals(&self.server.omega, &self.clients, self.objectives, self.rho)
    }

    pub fn run(&mut self) -> Result<Vec<RoundTrace>> {
        let remaining = self.cfg.rounds.saturating_sub(self.server.round);
        let mut trace = Vec::with_capacity(remaining);
        for _ in 0..remaining {
            trace.push(self.run_round()?);
        }
        Ok(trace)
    }

    /// Executes one round and returns its trace record.
    pub fn run_round(&mut self) -> Result<RoundTrace> {
        let round = self.server.round;
        let n = self.cfg.clients;
        let (selected, samples) = match self.cfg.algorithm {
            Algorithm::FedBack => {
                let sel = controller::select_clients(
                    &mut self.controllers,
                    &self.server.omega,
                    &self.server.z_cache,
                    &self.cfg.gains,
                    self.cfg.metric,
                )?;
                let samples = self
                    .controllers
                    .iter()
                    .zip(sel.events.iter().zip(&sel.distances))
                    .map(|(c, (&event, &distance))| ClientSample {
                        event,
                        load: c.load,
                        delta: c.delta,
                        distance,
                    })
                    .collect();
                (sel.selected, samples)
            }
            _ => {
                let spec = SamplerSpec {
                    rate: self.cfg.target_load,
                };
                let selected = baselines::sample_uniform(n, spec.rate, &mut self.sampler)?;
                let mut samples = vec![ClientSample::default(); n];
                for &i in &selected {
                    samples[i].event = true;
                }
                (selected, samples)
            }
        };

        let eps = self.cfg.epsilon(round);
        match self.cfg.algorithm {
            Algorithm::FedBack | Algorithm::FedAdmm => {
                for &i in &selected {
                    let next = client_update(&self.clients[i], &self.objectives[i], &self.server.omega, self.rho, eps)
                        .map_err(|e| annotate(e, round, i))?;
                    self.server.z_cache[i] = next.z_prev_local.clone();
                    self.clients[i] = next;
                }
                self.server.omega = aggregate(&self.server.z_cache)?;
            }
            Algorithm::FedAvg | Algorithm::FedProx => {
                let omega = self.server.omega.clone();
                let mu = self.cfg.prox_mu.unwrap_or(self.rho);
                for &i in &selected {
                    let f = &self.objectives[i];
                    let theta = if self.cfg.algorithm == Algorithm::FedAvg {
                        let lr = self.cfg.local_lr.unwrap_or_else(|| baselines::default_lr(f));
                        baselines::fedavg_local(f, &omega, self.cfg.local_steps, lr)?
                    } else {
                        baselines::fedprox_local(f, &omega, mu, eps).map_err(|e| annotate(e, round, i))?
                    };
                    self.clients[i] = ClientState {
                        lambda: DVector::zeros(theta.len()),
                        z_prev_local: theta.clone(),
                        theta: theta.clone(),
                    };
                    self.server.z_cache[i] = theta;
                }
                if !selected.is_empty() {
                    let thetas: Vec<_> = selected.iter().map(|&i| self.clients[i].theta.clone()).collect();
                    self.server.omega = aggregate(&thetas)?;
                }
            }
        }

        self.server.round += 1;
        self.cumulative_events += selected.len() as u64;
        let stat = self.stationarity()?;
        Ok(RoundTrace {
            round,
            selected_count: selected.len(),
            selected,
            clients: if self.cfg.record_clients { samples } else { Vec::new() },
            omega_norm: self.server.omega.norm(),
            grad_norm_global: stat.grad_norm_global,
            lagrangian: stat.lagrangian,
            f_theta: stat.f_theta,
            f_omega: stat.f_omega,
            cumulative_events: self.cumulative_events,
        })
    }
}

fn annotate(err: Error, round: usize, client: usize) -> Error {
    match err {
        Error::SolverFailure { .. } => {
            log::error!("round {round}: client {client} inner solver failed: {err}");
            err
        }
        other => other,
    }
}
