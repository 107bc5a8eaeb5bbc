//! Local client losses and the inexact proximal solver used by the primal update.
//!
//! Two families are supported:
//!
//! * least squares, `f(θ) = ½|Aθ − b|²`;
//! * multinomial logistic regression (softmax cross-entropy, summed over samples).
//!
//! The logistic parameter vector is laid out class-major: with `p` features and `C`
//! classes, `θ[c·p + j]` is the weight of feature `j` for class `c`, so `d = p·C`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Inner-step cap for the iterative proximal solver.
pub const MAX_PROX_STEPS: usize = 10_000;

const POWER_ITERATION_RTOL: f64 = 1e-8;
const POWER_ITERATION_MAX: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone)]
struct LeastSquares {
    design: DMatrix<f64>,
    targets: DVector<f64>,
    // AᵀA and Aᵀb, so gradients cost O(d²) instead of O(n·d).
    gram: DMatrix<f64>,
    moment: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Softmax {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
}

#[derive(Debug, Clone)]
enum Loss {
    LeastSquares(LeastSquares),
    Softmax(Softmax),
}

/// A client's local loss `f_i` over its private data.
#[derive(Debug, Clone)]
pub struct Objective {
    loss: Loss,
    samples: usize,
    dim: usize,
    smoothness: f64,
}

/// One proximal subproblem: `min_θ f(θ) + (ρ/2)|θ − anchor|²`, solved until the
/// stationarity residual `|∇f(θ) + ρ(θ − anchor)|` drops to `tolerance`.
#[derive(Debug, Clone)]
pub struct ProxProblem {
    pub anchor: DVector<f64>,
    pub rho: f64,
    pub tolerance: f64,
    pub warm_start: DVector<f64>,
}

impl ProxProblem {
    pub fn new(anchor: DVector<f64>, rho: f64, tolerance: f64, warm_start: DVector<f64>) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::contract(format!("proximal weight must be positive, got {rho}")));
        }
        if !(tolerance > 0.0) {
            return Err(Error::contract(format!("prox tolerance must be positive, got {tolerance}")));
        }
        check_dim(anchor.len(), warm_start.len())?;
        Ok(Self {
            anchor,
            rho,
            tolerance,
            warm_start,
        })
    }
}

impl Objective {
    /// Least-squares loss `½|Aθ − b|²`.
    pub fn quadratic(design: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let (n, d) = design.shape();
        if n == 0 || d == 0 {
            return Err(Error::contract("design matrix must have at least one row and one column"));
        }
        if targets.len() != n {
            return Err(Error::contract(format!(
                "design has {n} rows but {} targets",
                targets.len()
            )));
        }
        let gram = design.tr_mul(&design);
        let moment = design.tr_mul(&targets);
        let smoothness = largest_eigenvalue(&gram);
        Ok(Self {
            loss: Loss::LeastSquares(LeastSquares {
                design,
                targets,
                gram,
                moment,
            }),
            samples: n,
            dim: d,
            smoothness,
        })
    }

    /// Softmax cross-entropy summed over samples; `labels[k] < classes`.
    pub fn logistic(features: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, p) = features.shape();
        if n == 0 || p == 0 {
            return Err(Error::contract("feature matrix must have at least one row and one column"));
        }
        if classes < 2 {
            return Err(Error::contract("logistic objective needs at least two classes"));
        }
        if labels.len() != n {
            return Err(Error::contract(format!(
                "feature matrix has {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let smoothness = 0.5 * largest_eigenvalue(&features.tr_mul(&features));
        Ok(Self {
            loss: Loss::Softmax(Softmax {
                features,
                labels,
                classes,
            }),
            samples: n,
            dim: p * classes,
            smoothness,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self.loss {
            Loss::LeastSquares(_) => ObjectiveKind::Quadratic,
            Loss::Softmax(_) => ObjectiveKind::Logistic,
        }
    }

    /// Number of local samples `n_i`.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// For least squares, the pair `(AᵀA, Aᵀb)`.
    pub fn normal_equations(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match &self.loss {
            Loss::LeastSquares(ls) => Some((&ls.gram, &ls.moment)),
            Loss::Softmax(_) => None,
        }
    }

    pub fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, theta.len())?;
        Ok(match &self.loss {
            Loss::LeastSquares(ls) => {
                let residual = &ls.design * theta - &ls.targets;
                0.5 * residual.norm_squared()
            }
            Loss::Softmax(sm) => sm.loss(theta),
        })
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, theta.len())?;
        Ok(self.gradient_unchecked(theta))
    }

    fn gradient_unchecked(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.loss {
            Loss::LeastSquares(ls) => &ls.gram * theta - &ls.moment,
            Loss::Softmax(sm) => sm.gradient(theta),
        }
    }

    /// Upper bound `r_i` on the Lipschitz constant of the gradient, fixed at
    /// construction.
    ///
    /// Least squares: `λ_max(AᵀA)` by power iteration. Logistic: `½·λ_max(XᵀX)`,
    /// which bounds the softmax Hessian because `diag(π) − ππᵀ ⪯ ½I`.
    pub fn smoothness_constant(&self) -> f64 {
        self.smoothness
    }

    /// `|∇f(θ) + ρ(θ − anchor)|`, the stopping quantity of the primal update.
    pub fn prox_residual(&self, prob: &ProxProblem, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, theta.len())?;
        check_dim(self.dim, prob.anchor.len())?;
        Ok(self.prox_gradient(prob, theta).norm())
    }

    fn prox_gradient(&self, prob: &ProxProblem, theta: &DVector<f64>) -> DVector<f64> {
        let mut g = self.gradient_unchecked(theta);
        g.axpy(prob.rho, theta, 1.0);
        g.axpy(-prob.rho, &prob.anchor, 1.0);
        g
    }

    /// Inexact proximal step. Least squares is solved in closed form
    /// `(AᵀA + ρI)⁻¹(Aᵀb + ρ·anchor)` and polished by gradient steps only if the
    /// residual test still fails; everything else runs gradient descent from the
    /// warm start.
    pub fn prox_solve(&self, prob: &ProxProblem) -> Result<DVector<f64>> {
        self.check_prox(prob)?;
        match &self.loss {
            Loss::LeastSquares(ls) => {
                let mut system = ls.gram.clone();
                for j in 0..self.dim {
                    system[(j, j)] += prob.rho;
                }
                let rhs = &ls.moment + &prob.anchor * prob.rho;
                let theta = system
                    .cholesky()
                    .map(|c| c.solve(&rhs))
                    .ok_or_else(|| Error::contract("AᵀA + ρI is not positive definite"))?;
                self.descend(prob, theta)
            }
            Loss::Softmax(_) => self.descend(prob, prob.warm_start.clone()),
        }
    }

    /// Gradient descent with step `1/(r + ρ)` from the warm start, for any kind.
    pub fn prox_solve_iterative(&self, prob: &ProxProblem) -> Result<DVector<f64>> {
        self.check_prox(prob)?;
        self.descend(prob, prob.warm_start.clone())
    }

    fn check_prox(&self, prob: &ProxProblem) -> Result<()> {
        check_dim(self.dim, prob.anchor.len())?;
        check_dim(self.dim, prob.warm_start.len())?;
        if !(prob.rho > 0.0) || !(prob.tolerance > 0.0) {
            return Err(Error::contract("prox problem needs rho > 0 and tolerance > 0"));
        }
        Ok(())
    }

    fn descend(&self, prob: &ProxProblem, mut theta: DVector<f64>) -> Result<DVector<f64>> {
        let mut g = self.prox_gradient(prob, &theta);
        let mut residual = g.norm();
        if residual <= prob.tolerance {
            return Ok(theta);
        }
        let step = 1.0 / (self.smoothness_constant() + prob.rho);
        for _ in 0..MAX_PROX_STEPS {
            theta.axpy(-step, &g, 1.0);
            g = self.prox_gradient(prob, &theta);
            residual = g.norm();
            if residual <= prob.tolerance {
                return Ok(theta);
            }
        }
        Err(Error::SolverFailure {
            residual,
            tolerance: prob.tolerance,
            iterations: MAX_PROX_STEPS,
        })
    }
}

impl Softmax {
    fn features_dim(&self) -> usize {
        self.features.ncols()
    }

    fn scores(&self, theta: &DVector<f64>, row: usize, out: &mut [f64]) {
        let p = self.features_dim();
        for (c, s) in out.iter_mut().enumerate() {
            let w = &theta.as_slice()[c * p..(c + 1) * p];
            *s = (0..p).map(|j| self.features[(row, j)] * w[j]).sum();
        }
    }

    fn loss(&self, theta: &DVector<f64>) -> f64 {
        let mut scores = vec![0.0; self.classes];
        let mut total = 0.0;
        for (row, &y) in self.labels.iter().enumerate() {
            self.scores(theta, row, &mut scores);
            total += log_sum_exp(&scores) - scores[y];
        }
        total
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let p = self.features_dim();
        let mut grad = DVector::zeros(theta.len());
        let mut scores = vec![0.0; self.classes];
        for (row, &y) in self.labels.iter().enumerate() {
            self.scores(theta, row, &mut scores);
            let lse = log_sum_exp(&scores);
            for (c, &s) in scores.iter().enumerate() {
                let coef = (s - lse).exp() - if c == y { 1.0 } else { 0.0 };
                for j in 0..p {
                    grad[c * p + j] += coef * self.features[(row, j)];
                }
            }
        }
        grad
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration on the Rayleigh quotient.
pub(crate) fn largest_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    let n = sym.nrows();
    // Fixed, generic start vector; not orthogonal to any coordinate axis.
    let mut v = DVector::from_fn(n, |j, _| 1.0 + 0.5 * ((j as f64) * 1.618_033_988_75).sin());
    v.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let w = sym * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (next - estimate).abs() <= POWER_ITERATION_RTOL * next.abs();
        estimate = next;
        if converged {
            break;
        }
        v = w / norm;
    }
    estimate
}
