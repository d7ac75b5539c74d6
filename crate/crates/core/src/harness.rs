//! Experiment drivers: sweep grids, Monte-Carlo trials and JSON-lines records.
//!
//! Every trial draws its randomness from
//! `fnv1a64("{master}:{experiment}:{grid}:{trial}")`, so a single grid point can
//! be rerun on its own and the output does not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{
    build_ise_quadratic, linspace, reference_mixture_components, reference_mixture_pdf, parzen, sample_reference_mixture,
    estimate_with_quadratic, ise_against, sparse_density_config, weighted_cluster_distance, KernelModel, Samples,
};
use crate::error::{Error, Result};
use crate::linops::{add_noise_snr, operator_norm, LinearOperator, PauliEnsemble};
use crate::matrixproj::{lambda_bracketing_solve, random_density_matrix, BracketingConfig, RankTraceProjector, TraceBallProjector};
use crate::numeric::{dist_sq, median, norm};
use crate::portfolio::{generate_regression_instance, solve_sparse_update, PortfolioConfig};
use crate::projections::{gshp, gssp, ConstraintSpec};
use crate::solver::{minimize, Init, LeastSquares, SolverConfig, StepRule};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn trial_seed(master: u64, experiment: &str, grid_index: usize, trial: usize) -> u64 {
    fnv1a64(format!("{master}:{experiment}:{grid_index}:{trial}").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// One method's outcome at one grid point and trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub method: String,
    pub grid_index: usize,
    pub grid_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub status: RecordStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock measurements; dropped when timing is disabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<BTreeMap<String, f64>>,
}

impl ExperimentRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).or_else(|| self.timing.as_ref().and_then(|t| t.get(name))).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumParams {
    pub qubits: u32,
    pub rank: usize,
    /// Measurement counts as multiples of `d r`.
    pub m_multiples: Vec<f64>,
    /// `None` for noiseless measurements.
    pub snr_db: Option<f64>,
    pub qubit_cap: u32,
    /// Step multiplier for the non-convex solver, `mu = c / (2 ||A||^2)`.
    pub step_c: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Iteration cap and tolerance of the trace-ball baseline.
    pub convex_max_iters: usize,
    pub convex_tol: f64,
    pub bracketing: BracketingConfig,
}

impl Default for QuantumParams {
    fn default() -> Self {
        let mut bracketing = BracketingConfig::default();
        bracketing.solver.max_iters = 300;
        bracketing.solver.tol = 1e-6;
        Self {
            qubits: 6,
            rank: 2,
            m_multiples: vec![2.0, 2.4, 2.8, 3.2, 4.0, 5.0],
            snr_db: None,
            qubit_cap: 8,
            step_c: 3.0,
            max_iters: 3000,
            tol: 1e-9,
            convex_max_iters: 3000,
            convex_tol: 1e-7,
            bracketing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub n: usize,
    pub sigma: f64,
    pub ks: Vec<usize>,
    /// Integration grid for the ISE.
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            n: 1000,
            sigma: 1.0,
            ks: vec![3, 5, 8, 10, 15],
            grid_min: -20.0,
            grid_max: 6.0,
            grid_points: 2601,
            max_iters: 3000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    pub p: usize,
    pub k: usize,
    /// Measurement counts as fractions of `p`.
    pub m_fractions: Vec<f64>,
    /// Fixed level; drawn per trial when absent.
    pub lambda: Option<f64>,
    pub config: PortfolioConfig,
}

impl Default for PortfolioParams {
    fn default() -> Self {
        Self {
            p: 500,
            k: 50,
            m_fractions: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            lambda: None,
            config: PortfolioConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub dims: Vec<usize>,
    pub k: usize,
    pub lambda: f64,
    pub repeats: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self { dims: vec![10_000, 100_000, 1_000_000], k: 100, lambda: 1.0, repeats: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "which", rename_all = "snake_case")]
pub enum ExperimentParams {
    Quantum(QuantumParams),
    Density(DensityParams),
    Portfolio(PortfolioParams),
    ProjectionBench(BenchParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub seed: u64,
    pub trials: usize,
    /// Methods to run; empty runs all of them.
    pub methods: Vec<String>,
    pub timing: bool,
    pub params: ExperimentParams,
}

pub const QUANTUM_METHODS: [&str; 4] = ["convex1", "convex2", "nonconvex_random", "nonconvex_convex_init"];
pub const DENSITY_METHODS: [&str; 3] = ["parzen", "convex", "sparse"];
pub const PORTFOLIO_METHODS: [&str; 2] = ["baseline", "gshp"];
pub const BENCH_METHODS: [&str; 2] = ["gssp", "gshp"];

impl ExperimentSpec {
    pub fn quantum() -> Self {
        Self::with(ExperimentParams::Quantum(QuantumParams::default()), "quantum", 10)
    }

    pub fn density() -> Self {
        Self::with(ExperimentParams::Density(DensityParams::default()), "density", 10)
    }

    pub fn portfolio() -> Self {
        Self::with(ExperimentParams::Portfolio(PortfolioParams::default()), "portfolio", 30)
    }

    pub fn projection_bench() -> Self {
        Self::with(ExperimentParams::ProjectionBench(BenchParams::default()), "projection_bench", 1)
    }

    fn with(params: ExperimentParams, id: &str, trials: usize) -> Self {
        Self { id: id.into(), seed: 0, trials, methods: Vec::new(), timing: true, params }
    }

    fn known_methods(&self) -> &'static [&'static str] {
        match self.params {
            ExperimentParams::Quantum(_) => &QUANTUM_METHODS,
            ExperimentParams::Density(_) => &DENSITY_METHODS,
            ExperimentParams::Portfolio(_) => &PORTFOLIO_METHODS,
            ExperimentParams::ProjectionBench(_) => &BENCH_METHODS,
        }
    }

    fn wants(&self, method: &str) -> bool {
        self.methods.is_empty() || self.methods.iter().any(|m| m == method)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        let known = self.known_methods();
        if let Some(bad) = self.methods.iter().find(|m| !known.contains(&m.as_str())) {
            return Err(Error::InvalidParameter(format!("unknown method {bad}; expected one of {known:?}")));
        }
        let grid_empty = match &self.params {
            ExperimentParams::Quantum(q) => {
                if q.qubits > q.qubit_cap {
                    return Err(Error::CapExceeded { what: "qubits", value: q.qubits as usize, cap: q.qubit_cap as usize });
                }
                if q.qubits == 0 || q.rank == 0 || q.rank > 1 << q.qubits {
                    return Err(Error::RankOutOfRange { r: q.rank, dim: 1 << q.qubits });
                }
                if q.m_multiples.iter().any(|m| !(*m > 0.0)) {
                    return Err(Error::InvalidParameter("measurement multiples must be positive".into()));
                }
                q.m_multiples.is_empty()
            }
            ExperimentParams::Density(d) => {
                if d.n < 2 || d.ks.iter().any(|&k| k == 0 || k > d.n) {
                    return Err(Error::InvalidParameter("density needs n >= 2 and 1 <= k <= n".into()));
                }
                d.ks.is_empty()
            }
            ExperimentParams::Portfolio(p) => {
                if p.k == 0 || p.k > p.p {
                    return Err(Error::SparsityOutOfRange { k: p.k, dim: p.p });
                }
                if p.m_fractions.iter().any(|f| !(*f > 0.0)) {
                    return Err(Error::InvalidParameter("measurement fractions must be positive".into()));
                }
                p.m_fractions.is_empty()
            }
            ExperimentParams::ProjectionBench(b) => {
                if b.dims.iter().any(|&p| b.k == 0 || b.k > p) || b.repeats == 0 {
                    return Err(Error::InvalidParameter("bench needs 1 <= k <= p and repeats >= 1".into()));
                }
                b.dims.is_empty()
            }
        };
        if grid_empty {
            return Err(Error::InvalidParameter("sweep grid is empty".into()));
        }
        Ok(())
    }
}

/// Runs every (grid point, trial) of the experiment, in parallel, and returns
/// the records in (grid, trial, method) order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ExperimentRecord>> {
    spec.validate()?;
    match &spec.params {
        ExperimentParams::Quantum(q) => run_quantum_experiment(spec, q),
        ExperimentParams::Density(d) => run_density_experiment(spec, d),
        ExperimentParams::Portfolio(p) => run_portfolio_experiment(spec, p),
        ExperimentParams::ProjectionBench(b) => run_projection_bench(spec, b),
    }
}

/// Builder for the records of one trial.
struct TrialContext<'a> {
    spec: &'a ExperimentSpec,
    grid_index: usize,
    grid_value: f64,
    trial: usize,
    seed: u64,
    records: Vec<ExperimentRecord>,
}

type Metrics = Vec<(&'static str, f64)>;

impl<'a> TrialContext<'a> {
    fn new(spec: &'a ExperimentSpec, grid_index: usize, grid_value: f64, trial: usize) -> Self {
        let seed = trial_seed(spec.seed, &spec.id, grid_index, trial);
        Self { spec, grid_index, grid_value, trial, seed, records: Vec::new() }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Runs `f` if the method is selected and records its metrics or its error.
    fn run<T>(&mut self, method: &str, f: impl FnOnce() -> Result<(Metrics, Metrics, T)>) -> Option<T> {
        if !self.spec.wants(method) {
            return None;
        }
        let started = Instant::now();
        let outcome = f();
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let mut record = ExperimentRecord {
            experiment: self.spec.id.clone(),
            method: method.to_string(),
            grid_index: self.grid_index,
            grid_value: self.grid_value,
            trial: self.trial,
            seed: self.seed,
            status: RecordStatus::Ok,
            error: None,
            metrics: BTreeMap::new(),
            timing: None,
        };
        let value = match outcome {
            Ok((metrics, timing, value)) => {
                record.metrics = metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                if self.spec.timing {
                    let mut t: BTreeMap<String, f64> = timing.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                    t.insert("wall_ms".into(), wall_ms);
                    record.timing = Some(t);
                }
                Some(value)
            }
            Err(e) => {
                log::warn!("{} {} grid {} trial {} failed: {e}", self.spec.id, method, self.grid_index, self.trial);
                record.status = RecordStatus::Failed;
                record.error = Some(e.to_string());
                None
            }
        };
        self.records.push(record);
        value
    }
}

fn run_grid<F>(spec: &ExperimentSpec, grid: &[f64], trial_fn: F) -> Vec<ExperimentRecord>
where
    F: Fn(&mut TrialContext<'_>) + Sync,
{
    let tasks: Vec<(usize, usize)> =
        (0..grid.len()).flat_map(|g| (0..spec.trials).map(move |t| (g, t))).collect();
    tasks
        .par_iter()
        .map(|&(g, t)| {
            let mut ctx = TrialContext::new(spec, g, grid[g], t);
            trial_fn(&mut ctx);
            ctx.records
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Records the same error under every requested method.
fn fail_all(ctx: &mut TrialContext<'_>, methods: &[&str], error: Error) {
    for method in methods {
        let e = error.clone();
        ctx.run(method, || -> Result<(Metrics, Metrics, ())> { Err(e) });
    }
}

fn median_ms(seconds: &[f64]) -> f64 {
    median(seconds).map_or(f64::NAN, |s| s * 1e3)
}

fn relative_frobenius(estimate: &[f64], truth: &[f64]) -> f64 {
    dist_sq(estimate, truth).sqrt() / norm(truth)
}

/// Tomography from random Pauli measurements: two convex baselines and the
/// rank/trace-projected gradient from a random or a convex start.
pub fn run_quantum_experiment(spec: &ExperimentSpec, q: &QuantumParams) -> Result<Vec<ExperimentRecord>> {
    let d = 1usize << q.qubits;
    let r = q.rank;
    Ok(run_grid(spec, &q.m_multiples, |ctx| {
        let m = ((ctx.grid_value * (d * r) as f64).round() as usize).clamp(1, d * d);
        let setup = (|| -> Result<_> {
            let mut rng = ctx.rng(0);
            let truth = random_density_matrix(d, r, rng.random())?.to_row_major();
            let ensemble = PauliEnsemble::random(q.qubits, m, rng.random())?;
            let clean = ensemble.apply(&truth);
            let y = match q.snr_db {
                Some(db) => add_noise_snr(&clean, db, rng.random())?,
                None => clean,
            };
            let op_norm = operator_norm(&ensemble, 100, 0x5eed);
            Ok((truth, ensemble, y, op_norm, rng.random::<u64>()))
        })();
        let (truth, ensemble, y, op_norm, init_seed) = match setup {
            Ok(s) => s,
            Err(e) => return fail_all(ctx, &QUANTUM_METHODS, e),
        };
        let objective = match LeastSquares::with_norm(&ensemble, &y, op_norm) {
            Ok(o) => o,
            Err(e) => return fail_all(ctx, &QUANTUM_METHODS, e),
        };

        ctx.run("convex1", || {
            let out = lambda_bracketing_solve(&ensemble, op_norm, &y, d, r, &q.bracketing)?;
            let est = out.estimate.matrix.to_row_major();
            Ok((
                vec![
                    ("m", m as f64),
                    ("rel_error", relative_frobenius(&est, &truth)),
                    ("rank", out.rank as f64),
                    ("exact_rank", if out.exact_rank { 1.0 } else { 0.0 }),
                    ("lambda", out.lambda),
                    ("iterations", out.iterations as f64),
                ],
                vec![("iter_ms", median_ms(&out.iteration_seconds))],
                (),
            ))
        });

        let convex2_solve = || -> Result<(Metrics, Metrics, Vec<f64>)> {
            let config = SolverConfig {
                step: StepRule::FixedOverNormSq { c: 1.0 },
                max_iters: q.convex_max_iters,
                tol: q.convex_tol,
                init: Init::Zero,
                momentum: true,
                record_support: false,
            };
            let sol = minimize(&objective, &TraceBallProjector { d }, &config)?;
            Ok((
                vec![
                    ("m", m as f64),
                    ("rel_error", relative_frobenius(&sol.x, &truth)),
                    ("iterations", sol.trace.iterations() as f64),
                ],
                vec![("iter_ms", median_ms(&sol.trace.iteration_seconds))],
                sol.x,
            ))
        };
        let convex2 = if spec.wants("convex2") {
            ctx.run("convex2", convex2_solve)
        } else if spec.wants("nonconvex_convex_init") {
            convex2_solve().ok().map(|(_, _, x)| x)
        } else {
            None
        };

        let nonconvex = |init: Init| -> Result<(Metrics, Metrics, ())> {
            let config = SolverConfig {
                step: StepRule::FixedOverNormSq { c: q.step_c },
                max_iters: q.max_iters,
                tol: q.tol,
                init,
                momentum: false,
                record_support: false,
            };
            let sol = minimize(&objective, &RankTraceProjector { d, r }, &config)?;
            Ok((
                vec![
                    ("m", m as f64),
                    ("rel_error", relative_frobenius(&sol.x, &truth)),
                    ("iterations", sol.trace.iterations() as f64),
                    ("converged", if sol.trace.status == crate::solver::SolveStatus::Converged { 1.0 } else { 0.0 }),
                ],
                vec![("iter_ms", median_ms(&sol.trace.iteration_seconds))],
                (),
            ))
        };
        ctx.run("nonconvex_random", || nonconvex(Init::Random(init_seed)));
        ctx.run("nonconvex_convex_init", || match &convex2 {
            Some(x) => nonconvex(Init::Warm(x.clone())),
            None => Err(Error::InvalidParameter("trace-ball baseline failed; no convex start".into())),
        });
    }))
}

/// Density estimation on the reference mixture: Parzen, the convex ISE
/// minimizer and the `k`-sparse minimizer for each `k`.
pub fn run_density_experiment(spec: &ExperimentSpec, dp: &DensityParams) -> Result<Vec<ExperimentRecord>> {
    let means: Vec<f64> = reference_mixture_components().iter().map(|c| c.0).collect();
    let grid = linspace(dp.grid_min, dp.grid_max, dp.grid_points);
    // grid 0 carries the k-independent methods, grid i >= 1 the sparse solve with ks[i-1]
    let mut sweep = vec![0.0];
    sweep.extend(dp.ks.iter().map(|&k| k as f64));
    let trials: Vec<usize> = (0..spec.trials).collect();
    let per_trial: Vec<Vec<ExperimentRecord>> = trials
        .par_iter()
        .map(|&trial| {
            let seed = trial_seed(spec.seed, &spec.id, 0, trial);
            let samples = Samples::from_1d(sample_reference_mixture(dp.n, seed));
            let built = build_ise_quadratic(&samples, dp.sigma).and_then(|q| q.objective());
            let describe = |model: &KernelModel, objective: Option<f64>| -> Result<Metrics> {
                let mut m = vec![
                    ("ise", ise_against(model, reference_mixture_pdf, &grid)?),
                    ("nnz", model.nnz() as f64),
                    ("tail_mass_top5", model.tail_mass(5)),
                    ("cluster_distance", weighted_cluster_distance(model, &means)),
                ];
                if let Some(g) = objective {
                    m.push(("objective", g));
                }
                Ok(m)
            };
            let mut records = Vec::new();
            for (g, &value) in sweep.iter().enumerate() {
                let mut ctx = TrialContext::new(spec, g, value, trial);
                ctx.seed = seed;
                let config = SolverConfig {
                    step: StepRule::FixedOverNormSq { c: 1.0 },
                    max_iters: dp.max_iters,
                    tol: dp.tol,
                    init: Init::Zero,
                    momentum: false,
                    record_support: false,
                };
                let fit = |spec_c: ConstraintSpec, config: &SolverConfig| -> Result<(Metrics, Metrics, ())> {
                    let objective = built.as_ref().map_err(Clone::clone)?;
                    let (model, trace) = estimate_with_quadratic(&samples, dp.sigma, objective, spec_c, config)?;
                    let mut metrics = describe(&model, Some(trace.final_objective()))?;
                    metrics.push(("iterations", trace.iterations() as f64));
                    Ok((metrics, vec![("iter_ms", median_ms(&trace.iteration_seconds))], ()))
                };
                if g == 0 {
                    ctx.run("parzen", || {
                        let model = parzen(&samples, dp.sigma)?;
                        Ok((describe(&model, None)?, Vec::new(), ()))
                    });
                    let convex_config = SolverConfig { momentum: true, ..config.clone() };
                    ctx.run("convex", || fit(ConstraintSpec::SimplexConvex { lambda: 1.0 }, &convex_config));
                } else {
                    let k = dp.ks[g - 1];
                    ctx.run("sparse", || {
                        let sparse_config = SolverConfig {
                            max_iters: dp.max_iters,
                            tol: dp.tol,
                            ..sparse_density_config(k, dp.sigma, samples.dim())?
                        };
                        fit(ConstraintSpec::SimplexSparse { k, lambda: 1.0 }, &sparse_config)
                    });
                }
                records.extend(ctx.records);
            }
            records
        })
        .collect();
    // emit in (grid, trial) order like the other experiments
    let mut all: Vec<ExperimentRecord> = per_trial.into_iter().flatten().collect();
    all.sort_by_key(|r| (r.grid_index, r.trial));
    Ok(all)
}

/// Sparse regression with a sum constraint: hard-thresholding baseline with
/// the level in the loss, refined by the sparse hyperplane projector.
pub fn run_portfolio_experiment(spec: &ExperimentSpec, pp: &PortfolioParams) -> Result<Vec<ExperimentRecord>> {
    Ok(run_grid(spec, &pp.m_fractions, |ctx| {
        let m = ((ctx.grid_value * pp.p as f64).round() as usize).max(1);
        let instance = generate_regression_instance(pp.p, m, pp.k, pp.lambda, ctx.seed);
        let outcome = instance.and_then(|inst| {
            let started = Instant::now();
            let out = solve_sparse_update(&inst, &pp.config)?;
            Ok((inst, out, started.elapsed().as_secs_f64() * 1e3))
        });
        let describe = |inst: &crate::portfolio::RegressionInstance, sol: &crate::solver::Solution| -> Metrics {
            vec![
                ("m", m as f64),
                ("lambda", inst.lambda),
                ("rel_error", inst.relative_error(&sol.x)),
                ("sparsity", sol.x.iter().filter(|v| **v != 0.0).count() as f64),
                ("sum_violation", (sol.x.iter().sum::<f64>() - inst.lambda).abs()),
                ("iters", sol.trace.iterations() as f64),
            ]
        };
        match outcome {
            Ok((inst, out, total_ms)) => {
                if let Some(base) = &out.baseline {
                    let metrics = describe(&inst, base);
                    ctx.run("baseline", || Ok((metrics, vec![("iter_ms", median_ms(&base.trace.iteration_seconds))], ())));
                }
                let metrics = describe(&inst, &out.refined);
                ctx.run("gshp", || {
                    Ok((
                        metrics,
                        vec![("iter_ms", median_ms(&out.refined.trace.iteration_seconds)), ("total_ms", total_ms)],
                        (),
                    ))
                });
            }
            Err(e) => fail_all(ctx, &PORTFOLIO_METHODS, e),
        }
    }))
}

/// Wall time of the sparse projectors as the dimension grows.
/// Repeats run sequentially so timings do not compete for cores.
pub fn run_projection_bench(spec: &ExperimentSpec, b: &BenchParams) -> Result<Vec<ExperimentRecord>> {
    let grid: Vec<f64> = b.dims.iter().map(|&p| p as f64).collect();
    let mut records = Vec::new();
    for (g, &p) in b.dims.iter().enumerate() {
        for trial in 0..spec.trials {
            let mut ctx = TrialContext::new(spec, g, grid[g], trial);
            let mut rng = ctx.rng(0);
            let w: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let bench = |f: &dyn Fn(&[f64]) -> Result<crate::projections::ProjectionResult>| -> Result<(Metrics, Metrics, ())> {
                let mut times = Vec::with_capacity(b.repeats);
                let mut last = None;
                for _ in 0..b.repeats {
                    let started = Instant::now();
                    last = Some(f(&w)?);
                    times.push(started.elapsed().as_secs_f64());
                }
                let out = last.expect("repeats >= 1");
                Ok((
                    vec![("p", p as f64), ("distance_sq", out.distance_sq), ("nnz", out.beta.nnz() as f64)],
                    vec![("median_ms", median_ms(&times))],
                    (),
                ))
            };
            ctx.run("gssp", || bench(&|w| gssp(w, b.k, b.lambda)));
            ctx.run("gshp", || bench(&|w| gshp(w, b.k, b.lambda)));
            records.extend(ctx.records);
        }
    }
    Ok(records)
}

pub fn write_jsonl<W: Write>(records: &[ExperimentRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<ExperimentRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Median of one metric over the completed trials of a (method, grid point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub grid_index: usize,
    pub grid_value: f64,
    pub median: f64,
    pub completed: usize,
    pub failed: usize,
}

pub fn summarize(records: &[ExperimentRecord], metric: &str) -> Vec<Summary> {
    let mut groups: BTreeMap<(usize, String), (f64, Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry((r.grid_index, r.method.clone())).or_insert((r.grid_value, Vec::new(), 0));
        match (r.status, r.metric(metric)) {
            (RecordStatus::Ok, Some(v)) => entry.1.push(v),
            (RecordStatus::Failed, _) => entry.2 += 1,
            _ => {}
        }
    }
    groups
        .into_iter()
        .map(|((grid_index, method), (grid_value, values, failed))| Summary {
            method,
            grid_index,
            grid_value,
            median: median(&values).unwrap_or(f64::NAN),
            completed: values.len(),
            failed,
        })
        .collect()
}

/// Looks up a summary median.
pub fn median_of(summaries: &[Summary], method: &str, grid_index: usize) -> Option<f64> {
    summaries.iter().find(|s| s.method == method && s.grid_index == grid_index).map(|s| s.median)
}

/// Grid point x method table of medians.
pub fn pivot_csv(records: &[ExperimentRecord], metric: &str) -> String {
    let summaries = summarize(records, metric);
    let methods: BTreeSet<&str> = summaries.iter().map(|s| s.method.as_str()).collect();
    let grid: BTreeMap<usize, f64> = summaries.iter().map(|s| (s.grid_index, s.grid_value)).collect();
    let mut out = String::from("grid_value");
    for m in &methods {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for (g, value) in grid {
        out.push_str(&value.to_string());
        for m in &methods {
            out.push(',');
            if let Some(v) = median_of(&summaries, m, g) {
                out.push_str(&format!("{v:e}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
        assert_ne!(trial_seed(1, "x", 0, 1), trial_seed(1, "x", 1, 0));
    }

    #[test]
    fn validation() {
        let mut spec = ExperimentSpec::quantum();
        spec.trials = 0;
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::quantum();
        if let ExperimentParams::Quantum(q) = &mut spec.params {
            q.qubits = 9;
        }
        assert!(matches!(spec.validate(), Err(Error::CapExceeded { .. })));
        let mut spec = ExperimentSpec::portfolio();
        spec.methods = vec!["nope".into()];
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::density();
        if let ExperimentParams::Density(d) = &mut spec.params {
            d.ks.clear();
        }
        assert!(spec.validate().is_err());
    }

    fn tiny_portfolio() -> ExperimentSpec {
        let mut spec = ExperimentSpec::portfolio();
        spec.trials = 2;
        spec.params = ExperimentParams::Portfolio(PortfolioParams {
            p: 30,
            k: 3,
            m_fractions: vec![0.5, 0.9],
            ..PortfolioParams::default()
        });
        spec
    }

    #[test]
    fn records_are_ordered_and_summarized() {
        let records = run_experiment(&tiny_portfolio()).unwrap();
        assert_eq!(records.len(), 2 * 2 * 2);
        let keys: Vec<(usize, usize)> = records.iter().map(|r| (r.grid_index, r.trial)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let summaries = summarize(&records, "rel_error");
        assert_eq!(summaries.len(), 4);
        assert!(summaries.iter().all(|s| s.completed == 2 && s.failed == 0));
        let csv = pivot_csv(&records, "rel_error");
        assert_eq!(csv.lines().next().unwrap(), "grid_value,baseline,gshp");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn no_timing_output_is_reproducible() {
        let mut spec = tiny_portfolio();
        spec.timing = false;
        let mut a = Vec::new();
        write_jsonl(&run_experiment(&spec).unwrap(), &mut a).unwrap();
        let mut b = Vec::new();
        write_jsonl(&run_experiment(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(!text.contains("wall_ms"));
        assert_eq!(read_jsonl(&text).unwrap().len(), 8);
    }

    #[test]
    fn failures_are_recorded_not_dropped() {
        let mut spec = tiny_portfolio();
        if let ExperimentParams::Portfolio(p) = &mut spec.params {
            p.config.solver.tol = -1.0;
        }
        let records = run_experiment(&spec).unwrap();
        assert!(records.iter().all(|r| r.status == RecordStatus::Failed && r.error.is_some()));
        let s = summarize(&records, "rel_error");
        assert!(s.iter().all(|s| s.completed == 0 && s.failed == 2 && s.median.is_nan()));
    }
}
