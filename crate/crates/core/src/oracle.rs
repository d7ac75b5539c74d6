//! Brute-force certification of the sparse projectors.
//!
//! Every support of size exactly `k` is enumerated in lexicographic order, the
//! restricted vector is projected onto the simplex or hyperplane, and the
//! closest candidate wins. Supports smaller than `k` never do better, so the
//! enumeration is complete.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::numeric::binomial;
use crate::projections::{
    gshp, gssp, project_hyperplane, project_simplex, set_function_hyperplane, set_function_simplex,
    ConstraintSpec, ProjectionResult, SparseVector,
};

pub const DEFAULT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_support: Vec<usize>,
    pub best_beta: SparseVector,
    pub best_distance_sq: f64,
    /// Largest set-function value over all `k`-supports.
    pub best_objective: f64,
    pub enumerated: u128,
}

/// Lexicographic k-combinations of `0..n`.
pub struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Self { n, current: (0..k).collect(), done: k > n }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] < self.n - k + i {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Exhaustive projection with the default budget.
pub fn oracle_project(w: &[f64], spec: ConstraintSpec) -> Result<OracleResult> {
    oracle_project_with_budget(w, spec, DEFAULT_BUDGET)
}

pub fn oracle_project_with_budget(w: &[f64], spec: ConstraintSpec, budget: u128) -> Result<OracleResult> {
    check_finite(w)?;
    spec.validate(w.len())?;
    let (k, lambda, simplex) = match spec {
        ConstraintSpec::SimplexSparse { k, lambda } => (k, lambda, true),
        ConstraintSpec::HyperplaneSparse { k, lambda } => (k, lambda, false),
        other => {
            return Err(Error::InvalidParameter(format!("oracle supports sparse simplex/hyperplane only, got {other:?}")))
        }
    };
    let p = w.len();
    let supports = binomial(p, k);
    if supports > budget {
        return Err(Error::BudgetExceeded { supports, budget });
    }

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    let mut best_objective = f64::NEG_INFINITY;
    let mut enumerated = 0u128;
    for support in Combinations::new(p, k) {
        enumerated += 1;
        let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
        let (values, objective) = if simplex {
            (project_simplex(&restricted, lambda)?.0, set_function_simplex(w, &support, lambda)?)
        } else {
            (project_hyperplane(&restricted, lambda)?.0, set_function_hyperplane(w, &support, lambda)?)
        };
        let on: f64 = values.iter().zip(&restricted).map(|(b, v)| (b - v) * (b - v)).sum();
        let mut in_support = vec![false; p];
        for &i in &support {
            in_support[i] = true;
        }
        let off: f64 = (0..p).filter(|&i| !in_support[i]).map(|i| w[i] * w[i]).sum();
        let distance = on + off;
        best_objective = best_objective.max(objective);
        if best.as_ref().map_or(true, |(d, _, _)| distance < *d) {
            best = Some((distance, support, values));
        }
    }
    let (best_distance_sq, best_support, values) = best.expect("at least one support");
    let best_beta = SparseVector::new(p, best_support.clone(), values)?;
    Ok(OracleResult { best_support, best_beta, best_distance_sq, best_objective, enumerated })
}

/// Entry distributions used by the certification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryDistribution {
    Gaussian,
    Uniform,
    /// Small integers, many ties.
    Integer,
    /// A handful of distinct values repeated.
    Duplicates,
}

impl EntryDistribution {
    pub const ALL: [EntryDistribution; 4] = [Self::Gaussian, Self::Uniform, Self::Integer, Self::Duplicates];

    pub fn sample<R: Rng>(&self, p: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Gaussian => (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect(),
            Self::Uniform => (0..p).map(|_| rng.random_range(-3.0..3.0)).collect(),
            Self::Integer => (0..p).map(|_| rng.random_range(-3i32..=3) as f64).collect(),
            Self::Duplicates => {
                let pool: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                (0..p).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            }
        }
    }
}

/// One randomized certification instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub w: Vec<f64>,
    pub spec: ConstraintSpec,
    pub distribution: EntryDistribution,
}

pub const LEVELS: [f64; 5] = [-1.0, 0.0, 0.5, 1.0, 10.0];

/// Deterministic stream of small instances covering `p` in 2..=12, `k` in
/// 1..=min(p,5), all levels and all entry distributions, alternating the
/// simplex and hyperplane problems.
pub fn random_instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let distribution = EntryDistribution::ALL[t % 4];
            let p = rng.random_range(2..=12usize);
            let k = rng.random_range(1..=p.min(5));
            let w = distribution.sample(p, &mut rng);
            let spec = if (t / 4) % 2 == 0 {
                let lambda = [0.5, 1.0, 10.0][rng.random_range(0..3)];
                ConstraintSpec::SimplexSparse { k, lambda }
            } else {
                ConstraintSpec::HyperplaneSparse { k, lambda: LEVELS[rng.random_range(0..LEVELS.len())] }
            };
            Instance { w, spec, distribution }
        })
        .collect()
}

/// A greedy projector under certification.
pub type GreedyFn = fn(&[f64], usize, f64) -> Result<ProjectionResult>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub w: Vec<f64>,
    pub spec: ConstraintSpec,
    pub greedy_distance_sq: f64,
    pub oracle_distance_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub first_counterexample: Option<Counterexample>,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares greedy projectors against the oracle on `trials` random
/// instances: distance exactness, set-function optimality of the selected
/// support and feasibility.
pub fn certify(trials: usize, seed: u64, simplex: GreedyFn, hyperplane: GreedyFn) -> Result<Vec<PropertyOutcome>> {
    let mut exact = PropertyOutcome { name: "distance equals oracle".into(), checked: 0, failures: 0, first_counterexample: None };
    let mut argmax = PropertyOutcome { name: "support maximizes set function".into(), checked: 0, failures: 0, first_counterexample: None };
    let mut feasible = PropertyOutcome { name: "output feasible".into(), checked: 0, failures: 0, first_counterexample: None };

    for inst in random_instances(trials, seed) {
        let (k, lambda) = match inst.spec {
            ConstraintSpec::SimplexSparse { k, lambda } | ConstraintSpec::HyperplaneSparse { k, lambda } => (k, lambda),
            _ => unreachable!("instances are sparse"),
        };
        let is_simplex = matches!(inst.spec, ConstraintSpec::SimplexSparse { .. });
        let greedy = if is_simplex { simplex(&inst.w, k, lambda)? } else { hyperplane(&inst.w, k, lambda)? };
        let oracle = oracle_project(&inst.w, inst.spec)?;
        let cx = || Counterexample {
            w: inst.w.clone(),
            spec: inst.spec,
            greedy_distance_sq: greedy.distance_sq,
            oracle_distance_sq: oracle.best_distance_sq,
        };

        exact.checked += 1;
        if (greedy.distance_sq - oracle.best_distance_sq).abs() > 1e-9 * (1.0 + oracle.best_distance_sq) {
            exact.failures += 1;
            exact.first_counterexample.get_or_insert_with(cx);
        }

        argmax.checked += 1;
        let value = if is_simplex {
            set_function_simplex(&inst.w, &greedy.selected, lambda)?
        } else {
            set_function_hyperplane(&inst.w, &greedy.selected, lambda)?
        };
        if greedy.selected.len() != k || (value - oracle.best_objective).abs() > 1e-9 * (1.0 + oracle.best_objective.abs()) {
            argmax.failures += 1;
            argmax.first_counterexample.get_or_insert_with(cx);
        }

        feasible.checked += 1;
        if !inst.spec.is_feasible(&greedy.beta.to_dense(), 1e-10) {
            feasible.failures += 1;
            feasible.first_counterexample.get_or_insert_with(cx);
        }
    }
    Ok(vec![exact, argmax, feasible])
}

/// [`certify`] against the library projectors.
pub fn certify_library(trials: usize, seed: u64) -> Result<Vec<PropertyOutcome>> {
    certify(trials, seed, gssp, gshp)
}

/// Deliberately broken sparse hyperplane projector that seeds the selector
/// at the wrong end. Used to check that the certifier reports failures.
#[doc(hidden)]
pub fn gshp_wrong_seed(w: &[f64], k: usize, lambda: f64) -> Result<ProjectionResult> {
    let flipped: Vec<f64> = w.iter().map(|v| -v).collect();
    let mut support = crate::projections::gshp_support(&flipped, k, lambda)?;
    support.sort_unstable();
    let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
    let (values, tau) = project_hyperplane(&restricted, lambda)?;
    let mut dense = vec![0.0; w.len()];
    for (&i, v) in support.iter().zip(values) {
        dense[i] = v;
    }
    let distance_sq = dense.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ProjectionResult { beta: SparseVector::from_dense(&dense), selected: support, tau, distance_sq, objective: 0.0 })
}
