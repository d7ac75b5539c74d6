//! Projected gradient descent over arbitrary (possibly non-convex) projectors.
//!
//! Iterates `x <- P(x - mu * grad f(x))`. Gradients keep the factor two of the
//! squared loss, `grad ||y - A x||^2 = 2 A^T (A x - y)`, and every step rule is
//! stated against that convention.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{operator_norm, LinearOperator};
use crate::numeric::{dist_sq, norm, norm_sq};
use crate::projections::{ConstraintSpec, SparseVector};

/// A smooth objective with its gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient at `x` into `grad` and returns the objective value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_and_gradient(x, &mut g)
    }

    /// Half the gradient's Lipschitz constant: `||A||^2` for least squares,
    /// `lambda_max(Q)` for `x^T Q x - c^T x`.
    fn curvature(&self) -> f64;
}

/// `f(x) = ||y - A x||^2`.
pub struct LeastSquares<'a, A: LinearOperator + ?Sized> {
    op: &'a A,
    y: &'a [f64],
    norm_sq: f64,
}

impl<'a, A: LinearOperator + ?Sized> LeastSquares<'a, A> {
    /// Estimates `||A||` with the power method.
    pub fn new(op: &'a A, y: &'a [f64]) -> Result<Self> {
        let n = operator_norm(op, 500, 0x5eed);
        Self::with_norm(op, y, n)
    }

    /// Uses a known operator norm.
    pub fn with_norm(op: &'a A, y: &'a [f64], op_norm: f64) -> Result<Self> {
        if y.len() != op.output_dim() {
            return Err(Error::DimensionMismatch { expected: op.output_dim(), found: y.len() });
        }
        Ok(Self { op, y, norm_sq: op_norm * op_norm })
    }

    pub fn operator(&self) -> &A {
        self.op
    }
}

impl<A: LinearOperator + ?Sized> Objective for LeastSquares<'_, A> {
    fn dim(&self) -> usize {
        self.op.input_dim()
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut residual = self.op.apply(x);
        residual.iter_mut().zip(self.y).for_each(|(r, y)| *r -= y);
        self.op.adjoint_into(&residual, grad);
        grad.iter_mut().for_each(|g| *g *= 2.0);
        norm_sq(&residual)
    }

    fn value(&self, x: &[f64]) -> f64 {
        dist_sq(&self.op.apply(x), self.y)
    }

    fn curvature(&self) -> f64 {
        self.norm_sq
    }
}

/// `g(x) = x^T Q x - c^T x` for symmetric `Q`.
pub struct Quadratic {
    q: DMatrix<f64>,
    c: Vec<f64>,
    lambda_max: f64,
}

impl Quadratic {
    pub fn new(q: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        let lambda_max = largest_eigenvalue(&q, 1000, 1e-12)?;
        Self::with_curvature(q, c, lambda_max)
    }

    pub fn with_curvature(q: DMatrix<f64>, c: Vec<f64>, lambda_max: f64) -> Result<Self> {
        if !q.is_square() {
            return Err(Error::InvalidParameter("quadratic form must be square".into()));
        }
        if c.len() != q.nrows() {
            return Err(Error::DimensionMismatch { expected: q.nrows(), found: c.len() });
        }
        Ok(Self { q, c, lambda_max })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn linear(&self) -> &[f64] {
        &self.c
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.c.len();
        let xv = DVectorView::from_slice(x, n);
        let mut gv = DVectorViewMut::from_slice(grad, n);
        gv.gemv(1.0, &self.q, &xv, 0.0);
        let quad: f64 = gv.iter().zip(x).map(|(a, b)| a * b).sum();
        let lin: f64 = self.c.iter().zip(x).map(|(a, b)| a * b).sum();
        grad.iter_mut().zip(&self.c).for_each(|(g, c)| *g = 2.0 * *g - c);
        quad - lin
    }

    fn curvature(&self) -> f64 {
        self.lambda_max
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, inflated by
/// a relative `1e-9` so that step sizes derived from it stay safe.
pub fn largest_eigenvalue(q: &DMatrix<f64>, iters: usize, tol: f64) -> Result<f64> {
    let n = q.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut x = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = q * &x;
        let next = x.dot(&y);
        let yn = y.norm();
        if yn == 0.0 {
            return Ok(0.0);
        }
        x = y / yn;
        if (next - lambda).abs() <= tol * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(lambda * (1.0 + 1e-9))
}

/// Maps a gradient step onto a constraint set.
pub trait Projector {
    fn project(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Proximal operator `prox_{step * h}`; projectors ignore the step.
pub trait Proximal {
    fn prox(&self, v: &[f64], step: f64) -> Result<Vec<f64>>;
}

impl<P: Projector> Proximal for P {
    fn prox(&self, v: &[f64], _step: f64) -> Result<Vec<f64>> {
        self.project(v)
    }
}

impl Projector for ConstraintSpec {
    fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(ConstraintSpec::project(self, v)?.beta.to_dense())
    }
}

/// Step-size rule, stated for the gradient `2 A^T (A x - y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    /// `mu = c / (2 ||A||^2)`. `c = 1` is the convex-safe `1/L`; `c = 3`
    /// reproduces the update magnitude of `3/||A||^2` applied to `A^T(Ax - y)`.
    FixedOverNormSq { c: f64 },
    Fixed { mu: f64 },
    /// `mu = 1 / (2 (1 + delta))`.
    RipMotivated { delta: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::FixedOverNormSq { c: 3.0 }
    }
}

impl StepRule {
    pub fn step<O: Objective + ?Sized>(&self, objective: &O) -> Result<f64> {
        let mu = match *self {
            StepRule::FixedOverNormSq { c } => c / (2.0 * objective.curvature()),
            StepRule::Fixed { mu } => mu,
            StepRule::RipMotivated { delta } => 1.0 / (2.0 * (1.0 + delta)),
        };
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("step size {mu} must be positive and finite")));
        }
        Ok(mu)
    }
}

/// Starting point; every variant is projected before the first iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    /// Standard normal entries.
    Random(u64),
    Warm(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step: StepRule,
    pub max_iters: usize,
    /// Relative iterate change that stops the solver.
    pub tol: f64,
    pub init: Init,
    /// Nesterov/FISTA extrapolation. Only meaningful with convex sets.
    pub momentum: bool,
    /// Store each iterate's support in the trace.
    pub record_support: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: StepRule::default(),
            max_iters: 3000,
            tol: 1e-5,
            init: Init::Zero,
            momentum: false,
            record_support: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance {} must be positive", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// `||x_i - x_{i-1}|| / max(||x_i||, ||x_{i-1}||)`; zero for the start point.
    pub change: f64,
    pub nnz: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
    pub status: SolveStatus,
    pub step: f64,
    /// Wall time of each gradient+projection iteration.
    #[serde(skip)]
    pub iteration_seconds: Vec<f64>,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_objective(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Final iterate.
    pub x: Vec<f64>,
    pub trace: SolveTrace,
}

impl Solution {
    pub fn beta(&self) -> SparseVector {
        SparseVector::from_dense(&self.x)
    }
}

fn record(iteration: usize, objective: f64, change: f64, x: &[f64], with_support: bool) -> IterationRecord {
    let support: Vec<usize> = if with_support {
        x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    IterationRecord {
        iteration,
        objective,
        change,
        nnz: if with_support { support.len() } else { x.iter().filter(|v| **v != 0.0).count() },
        support: with_support.then_some(support),
    }
}

/// Projected (or proximal) gradient descent on `objective`.
pub fn minimize<O, P>(objective: &O, prox: &P, config: &SolverConfig) -> Result<Solution>
where
    O: Objective + ?Sized,
    P: Proximal + ?Sized,
{
    config.validate()?;
    let n = objective.dim();
    let mu = config.step.step(objective)?;
    let mut x = match &config.init {
        Init::Zero => prox.prox(&vec![0.0; n], mu)?,
        Init::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            prox.prox(&v, mu)?
        }
        Init::Warm(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: v.len() });
            }
            prox.prox(v, mu)?
        }
    };

    let mut grad = vec![0.0; n];
    let mut point = vec![0.0; n];
    let mut previous = x.clone();
    let mut t = 1.0_f64;
    let mut records = Vec::with_capacity(config.max_iters.min(4096) + 1);
    let mut iteration_seconds = Vec::with_capacity(config.max_iters.min(4096));
    let mut status = SolveStatus::MaxIters;

    records.push(record(0, objective.value(&x), 0.0, &x, config.record_support));

    for iteration in 1..=config.max_iters {
        let started = Instant::now();
        let base: &[f64] = if config.momentum && iteration > 1 {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            t = t_next;
            point.iter_mut().zip(x.iter().zip(&previous)).for_each(|(z, (a, b))| *z = a + beta * (a - b));
            &point
        } else {
            &x
        };
        let f_base = objective.value_and_gradient(base, &mut grad);
        if !f_base.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration });
        }
        if !config.momentum {
            // the gradient evaluation doubles as the objective of the last iterate
            if let Some(last) = records.last_mut() {
                last.objective = f_base;
            }
        }
        let stepped: Vec<f64> = base.iter().zip(&grad).map(|(b, g)| b - mu * g).collect();
        let next = prox.prox(&stepped, mu)?;
        iteration_seconds.push(started.elapsed().as_secs_f64());

        let scale = norm(&next).max(norm(&x)).max(f64::MIN_POSITIVE);
        let change = dist_sq(&next, &x).sqrt() / scale;
        previous = std::mem::replace(&mut x, next);
        let fx = if config.momentum { objective.value(&x) } else { f64::NAN };
        records.push(record(iteration, fx, change, &x, config.record_support));
        if change < config.tol {
            status = SolveStatus::Converged;
            break;
        }
    }
    if let Some(last) = records.last_mut() {
        if last.objective.is_nan() {
            last.objective = objective.value(&x);
        }
    }
    Ok(Solution { x, trace: SolveTrace { records, status, step: mu, iteration_seconds } })
}

/// Projected gradient on `||y - A x||^2`.
pub fn solve_pgd<A, P>(op: &A, y: &[f64], projector: &P, config: &SolverConfig) -> Result<Solution>
where
    A: LinearOperator + ?Sized,
    P: Proximal + ?Sized,
{
    let objective = LeastSquares::new(op, y)?;
    minimize(&objective, projector, config)
}

/// Largest relative discrepancy between the analytic gradient and a central
/// finite difference over `probes` random coordinates:
/// `|g_j - (f(x + h e_j) - f(x - h e_j)) / 2h| / (1 + |g_j|)`.
pub fn gradient_check<O: Objective + ?Sized>(objective: &O, x: &[f64], h: f64, probes: usize, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step {h} must be positive")));
    }
    let n = objective.dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: x.len() });
    }
    let mut grad = vec![0.0; n];
    objective.value_and_gradient(x, &mut grad);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for _ in 0..probes {
        let j = rng.random_range(0..n);
        probe[j] = x[j] + h;
        let up = objective.value(&probe);
        probe[j] = x[j] - h;
        let down = objective.value(&probe);
        probe[j] = x[j];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grad[j] - fd).abs() / (1.0 + grad[j].abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{gaussian_matrix, DenseOperator};

    #[test]
    fn identity_operator_feasible_target() {
        let op = DenseOperator::identity(3);
        let y = [0.6, 0.4, 0.0];
        let config = SolverConfig { step: StepRule::Fixed { mu: 0.5 }, ..SolverConfig::default() };
        let sol = solve_pgd(&op, &y, &ConstraintSpec::SimplexSparse { k: 2, lambda: 1.0 }, &config).unwrap();
        assert_eq!(sol.trace.status, SolveStatus::Converged);
        assert!(sol.trace.iterations() <= 2);
        assert!(dist_sq(&sol.x, &y).sqrt() < 1e-12);
        assert!(sol.trace.final_objective() < 1e-20);
    }

    #[test]
    fn square_gaussian_least_squares() {
        let p = 8;
        let op = gaussian_matrix(p, p, false, 11).unwrap();
        let y: Vec<f64> = (0..p).map(|i| (i as f64 * 0.7).sin()).collect();
        let config = SolverConfig {
            step: StepRule::FixedOverNormSq { c: 1.0 },
            max_iters: 200_000,
            tol: 1e-14,
            momentum: true,
            record_support: false,
            ..SolverConfig::default()
        };
        let sol = solve_pgd(&op, &y, &ConstraintSpec::SparsityOnly { k: p }, &config).unwrap();
        assert!(sol.trace.final_objective() <= 1e-8 * norm_sq(&y), "{}", sol.trace.final_objective());
        let direct = op.matrix().clone().lu().solve(&nalgebra::DVector::from_column_slice(&y)).unwrap();
        assert!(dist_sq(&sol.x, direct.as_slice()).sqrt() < 1e-3 * direct.norm());
    }

    #[test]
    fn convex_projection_descends_monotonically() {
        let op = gaussian_matrix(30, 12, true, 4).unwrap();
        let y: Vec<f64> = (0..30).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let config = SolverConfig { step: StepRule::FixedOverNormSq { c: 1.0 }, max_iters: 300, ..SolverConfig::default() };
        let sol = solve_pgd(&op, &y, &ConstraintSpec::SimplexConvex { lambda: 1.0 }, &config).unwrap();
        let f = sol.trace.objectives();
        assert!(f.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12), "{f:?}");
        assert!(ConstraintSpec::SimplexConvex { lambda: 1.0 }.is_feasible(&sol.x, 1e-9));
    }

    #[test]
    fn sparse_iterates_stay_feasible() {
        let op = gaussian_matrix(20, 15, true, 5).unwrap();
        let y: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let spec = ConstraintSpec::HyperplaneSparse { k: 3, lambda: -0.5 };
        let sol = solve_pgd(&op, &y, &spec, &SolverConfig { max_iters: 200, ..SolverConfig::default() }).unwrap();
        assert!(spec.is_feasible(&sol.x, 1e-9));
        assert!(sol.trace.records.iter().all(|r| r.nnz <= 3));
        // a converged point is a fixed point of the projected step
        if sol.trace.status == SolveStatus::Converged {
            let obj = LeastSquares::new(&op, &y).unwrap();
            let mut g = vec![0.0; 15];
            obj.value_and_gradient(&sol.x, &mut g);
            let stepped: Vec<f64> = sol.x.iter().zip(&g).map(|(x, g)| x - sol.trace.step * g).collect();
            let again = spec.project(&stepped).unwrap().beta.to_dense();
            assert!(dist_sq(&again, &sol.x).sqrt() <= 1e-4 * norm(&sol.x));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let op = gaussian_matrix(10, 6, false, 2).unwrap();
        let y = vec![0.3; 10];
        let ls = LeastSquares::new(&op, &y).unwrap();
        let x = [0.1, -0.2, 0.3, 0.0, 0.5, -1.0];
        assert!(gradient_check(&ls, &x, 1e-5, 20, 1).unwrap() < 1e-6);
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 3.0]);
        let quad = Quadratic::new(q, vec![1.0, -1.0, 0.5]).unwrap();
        assert!(gradient_check(&quad, &[0.2, 0.4, -0.3], 1e-5, 20, 1).unwrap() < 1e-6);
        assert!(gradient_check(&quad, &[0.0; 3], 0.0, 1, 1).is_err());
    }

    #[test]
    fn largest_eigenvalue_bounds_spectrum() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let l = largest_eigenvalue(&q, 1000, 1e-14).unwrap();
        assert!(l >= 3.0 && l < 3.0 + 1e-6);
    }

    #[test]
    fn overflow_is_reported() {
        let op = DenseOperator::new(DMatrix::from_element(2, 2, 1e200));
        let y = [1e200, 1e200];
        let config = SolverConfig { step: StepRule::Fixed { mu: 1.0 }, ..SolverConfig::default() };
        let err = solve_pgd(&op, &y, &ConstraintSpec::SparsityOnly { k: 2 }, &config).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
    }

    #[test]
    fn rejects_bad_configuration() {
        let op = DenseOperator::identity(2);
        let spec = ConstraintSpec::SparsityOnly { k: 1 };
        let bad_tol = SolverConfig { tol: 0.0, ..SolverConfig::default() };
        assert!(solve_pgd(&op, &[1.0, 0.0], &spec, &bad_tol).is_err());
        let bad_step = SolverConfig { step: StepRule::Fixed { mu: -1.0 }, ..SolverConfig::default() };
        assert!(solve_pgd(&op, &[1.0, 0.0], &spec, &bad_step).is_err());
        assert!(solve_pgd(&op, &[1.0], &spec, &SolverConfig::default()).is_err());
        let warm = SolverConfig { init: Init::Warm(vec![1.0]), ..SolverConfig::default() };
        assert!(solve_pgd(&op, &[1.0, 0.0], &spec, &warm).is_err());
    }

    #[test]
    fn trace_serializes_one_line_per_iteration() {
        let op = DenseOperator::identity(3);
        let config = SolverConfig { step: StepRule::Fixed { mu: 0.5 }, max_iters: 5, ..SolverConfig::default() };
        let sol = solve_pgd(&op, &[0.2, 0.7, 0.1], &ConstraintSpec::SimplexSparse { k: 1, lambda: 1.0 }, &config).unwrap();
        let mut buf = Vec::new();
        sol.trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), sol.trace.records.len());
        let first: IterationRecord = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first.iteration, 1);
        assert_eq!(first.support, Some(vec![1]));
        assert!(sol.trace.objectives().iter().all(|f| f.is_finite()));
    }
}
