//! Sparse portfolio updates: a synthetic regression benchmark and the
//! mean-variance update objective.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{gaussian_matrix, operator_norm, DenseOperator, LinearOperator, StackedOperator};
use crate::numeric::{compensated_sum, dist_sq, norm};
use crate::projections::ConstraintSpec;
use crate::solver::{largest_eigenvalue, minimize, Init, LeastSquares, Objective, Solution, SolverConfig, StepRule};

/// Smallest admissible `|lambda|` when the level is drawn at random.
pub const MIN_RANDOM_LEVEL: f64 = 1e-3;

/// `y = X beta*` with `beta*` exactly `k`-sparse and summing to `lambda`.
#[derive(Debug, Clone)]
pub struct RegressionInstance {
    pub x: DenseOperator,
    pub beta_star: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
    pub k: usize,
}

impl RegressionInstance {
    pub fn p(&self) -> usize {
        self.x.input_dim()
    }

    pub fn m(&self) -> usize {
        self.x.output_dim()
    }

    pub fn relative_error(&self, beta: &[f64]) -> f64 {
        dist_sq(beta, &self.beta_star).sqrt() / norm(&self.beta_star)
    }
}

/// Column-normalized Gaussian design and a random `k`-sparse signal. The level
/// is uniform on `[-1, 1]` (resampled while `|lambda| < 1e-3`) unless given.
pub fn generate_regression_instance(
    p: usize,
    m: usize,
    k: usize,
    lambda: Option<f64>,
    seed: u64,
) -> Result<RegressionInstance> {
    if k == 0 || k > p {
        return Err(Error::SparsityOutOfRange { k, dim: p });
    }
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one measurement".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = match lambda {
        Some(l) if l.is_finite() => l,
        Some(l) => return Err(Error::InvalidParameter(format!("level {l} is not finite"))),
        None => loop {
            let l: f64 = rng.random_range(-1.0..=1.0);
            if l.abs() >= MIN_RANDOM_LEVEL {
                break l;
            }
        },
    };
    let support = sample(&mut rng, p, k).into_vec();
    let values = loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let shift = (lambda - compensated_sum(v.iter().copied())) / k as f64;
        v.iter_mut().for_each(|x| *x += shift);
        // absorb the rounding residue in the largest entry
        let residue = lambda - compensated_sum(v.iter().copied());
        let top = (0..k).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("k >= 1");
        v[top] += residue;
        if v.iter().all(|x| *x != 0.0) {
            break v;
        }
    };
    let mut beta_star = vec![0.0; p];
    for (&i, v) in support.iter().zip(values) {
        beta_star[i] = v;
    }
    let x = gaussian_matrix(m, p, true, rng.random())?;
    let y = x.apply(&beta_star);
    Ok(RegressionInstance { x, beta_star, y, lambda, k })
}

/// Solver settings shared by the regression solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioConfig {
    pub solver: SolverConfig,
    /// Replaces the baseline as the starting point of the sparse update.
    pub warm_start: Option<Vec<f64>>,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig {
                step: StepRule::FixedOverNormSq { c: 1.0 },
                max_iters: 3000,
                tol: 1e-5,
                init: Init::Zero,
                momentum: false,
                record_support: false,
            },
            warm_start: None,
        }
    }
}

/// Hard thresholding on `||[X; 1^T/sqrt p] beta - [y; lambda/sqrt p]||^2`
/// over `k`-sparse vectors: the level constraint enters the loss only.
pub fn solve_hyperplane_baseline(instance: &RegressionInstance, config: &PortfolioConfig) -> Result<Solution> {
    let p = instance.p();
    let row_scale = 1.0 / (p as f64).sqrt();
    let ones = DenseOperator::new(DMatrix::from_element(1, p, row_scale));
    let stacked = StackedOperator::new(vec![Box::new(instance.x.clone()), Box::new(ones)])?;
    let mut target = instance.y.clone();
    target.push(instance.lambda * row_scale);
    let objective = LeastSquares::with_norm(&stacked, &target, operator_norm(&stacked, 300, 0x5eed))?;
    minimize(&objective, &ConstraintSpec::SparsityOnly { k: instance.k }, &config.solver)
}

/// Output of [`solve_sparse_update`].
#[derive(Debug, Clone)]
pub struct SparseUpdate {
    pub baseline: Option<Solution>,
    pub refined: Solution,
}

/// Projected gradient with the sparse hyperplane projector, started from the
/// baseline estimate (or from `config.warm_start`).
pub fn solve_sparse_update(instance: &RegressionInstance, config: &PortfolioConfig) -> Result<SparseUpdate> {
    let (baseline, start) = match &config.warm_start {
        Some(w) => (None, w.clone()),
        None => {
            let b = solve_hyperplane_baseline(instance, config)?;
            let x = b.x.clone();
            (Some(b), x)
        }
    };
    let objective = LeastSquares::with_norm(&instance.x, &instance.y, operator_norm(&instance.x, 300, 0x5eed))?;
    let spec = ConstraintSpec::HyperplaneSparse { k: instance.k, lambda: instance.lambda };
    let solver = SolverConfig { init: Init::Warm(start), ..config.solver.clone() };
    let refined = minimize(&objective, &spec, &solver)?;
    Ok(SparseUpdate { baseline, refined })
}

/// `(b + delta)^T Sigma (b + delta) - tau mu^T (b + delta)` over updates `delta`
/// with at most `k` nonzeros summing to `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioUpdateProblem {
    pub sigma_cov: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub tau_tradeoff: f64,
    pub current: Vec<f64>,
    pub k: usize,
    pub lambda: f64,
    curvature: f64,
}

impl PortfolioUpdateProblem {
    pub fn new(
        sigma_cov: DMatrix<f64>,
        mu: Vec<f64>,
        tau_tradeoff: f64,
        current: Vec<f64>,
        k: usize,
        lambda: f64,
    ) -> Result<Self> {
        let p = sigma_cov.nrows();
        if !sigma_cov.is_square() {
            return Err(Error::InvalidParameter("covariance must be square".into()));
        }
        for len in [mu.len(), current.len()] {
            if len != p {
                return Err(Error::DimensionMismatch { expected: p, found: len });
            }
        }
        let asym = (&sigma_cov - sigma_cov.transpose()).norm();
        if asym > 1e-10 * sigma_cov.norm() {
            return Err(Error::NotHermitian(asym / sigma_cov.norm()));
        }
        if sigma_cov.symmetric_eigenvalues().min() < -1e-10 * sigma_cov.norm() {
            return Err(Error::InvalidParameter("covariance is not positive semidefinite".into()));
        }
        ConstraintSpec::HyperplaneSparse { k, lambda }.validate(p)?;
        let curvature = largest_eigenvalue(&sigma_cov, 1000, 1e-12)?;
        Ok(Self { sigma_cov, mu, tau_tradeoff, current, k, lambda, curvature })
    }

    pub fn constraint(&self) -> ConstraintSpec {
        ConstraintSpec::HyperplaneSparse { k: self.k, lambda: self.lambda }
    }

    /// Minimizes the update objective by projected gradient from `delta = 0`.
    pub fn solve(&self, config: &SolverConfig) -> Result<Solution> {
        minimize(self, &self.constraint(), config)
    }
}

/// Objective value at `delta`.
pub fn markowitz_update_objective(problem: &PortfolioUpdateProblem, delta: &[f64]) -> f64 {
    problem.value(delta)
}

impl Objective for PortfolioUpdateProblem {
    fn dim(&self) -> usize {
        self.current.len()
    }

    fn value_and_gradient(&self, delta: &[f64], grad: &mut [f64]) -> f64 {
        let held = DVector::from_iterator(delta.len(), self.current.iter().zip(delta).map(|(b, d)| b + d));
        let sh = &self.sigma_cov * &held;
        let mut value = 0.0;
        for i in 0..held.len() {
            value += held[i] * sh[i] - self.tau_tradeoff * self.mu[i] * held[i];
            grad[i] = 2.0 * sh[i] - self.tau_tradeoff * self.mu[i];
        }
        value
    }

    fn curvature(&self) -> f64 {
        self.curvature
    }
}
