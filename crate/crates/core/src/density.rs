//! Kernel density estimation with simplex-constrained (optionally sparse) weights.
//!
//! The estimate `sum_i beta_i k_sigma(x, x_i)` is fitted by minimizing the
//! integrated squared error up to a constant, `beta^T Sigma beta - c^T beta`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::projections::ConstraintSpec;
use crate::solver::{minimize, Init, Quadratic, SolveTrace, SolverConfig, StepRule};

/// Points stored row-major, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn from_1d(values: Vec<f64>) -> Self {
        Self { dim: 1, data: values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.len() });
        }
        Ok(Self { dim, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Normalized 1-D Gaussian density with mean `y` and deviation `sigma`, at `x`.
pub fn gaussian_kernel_1d(x: f64, y: f64, sigma: f64) -> f64 {
    let z = (x - y) / sigma;
    (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * sigma)
}

/// Product-form Gaussian kernel in any dimension.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-0.5 * sq / (sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma).powi(x.len() as i32)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("kernel width {sigma} must be positive")))
    }
}

/// `Sigma_ij = k_{sqrt(2) sigma}(x_i, x_j)` and `c_i = mean_{j != i} k_sigma(x_i, x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IseQuadratic {
    pub sigma_matrix: DMatrix<f64>,
    pub c: Vec<f64>,
}

impl IseQuadratic {
    /// `g(beta) = beta^T Sigma beta - c^T beta` with its curvature.
    pub fn objective(&self) -> Result<Quadratic> {
        Quadratic::new(self.sigma_matrix.clone(), self.c.clone())
    }
}

pub fn build_ise_quadratic(samples: &Samples, sigma: f64) -> Result<IseQuadratic> {
    check_sigma(sigma)?;
    check_finite(samples.as_slice())?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 samples, got {n}")));
    }
    let wide = std::f64::consts::SQRT_2 * sigma;
    let mut gram = DMatrix::zeros(n, n);
    let mut c = vec![0.0; n];
    for i in 0..n {
        let xi = samples.point(i);
        gram[(i, i)] = gaussian_kernel(xi, xi, wide);
        for j in 0..i {
            let xj = samples.point(j);
            let s = gaussian_kernel(xi, xj, wide);
            gram[(i, j)] = s;
            gram[(j, i)] = s;
            let k = gaussian_kernel(xi, xj, sigma);
            c[i] += k;
            c[j] += k;
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    c.iter_mut().for_each(|v| *v *= scale);
    Ok(IseQuadratic { sigma_matrix: gram, c })
}

/// Weighted kernel mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    pub centers: Samples,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

/// On-disk form of a [`KernelModel`]; only the support is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModelFile {
    pub sigma: f64,
    pub centers: Vec<Vec<f64>>,
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl KernelModel {
    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] != 0.0).collect()
    }

    pub fn nnz(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| w * gaussian_kernel(x, self.centers.point(i), self.sigma))
            .sum()
    }

    /// Mass outside the `top` largest weights.
    pub fn tail_mass(&self, top: usize) -> f64 {
        let mut w = self.weights.clone();
        w.sort_by(|a, b| b.total_cmp(a));
        w.iter().skip(top).sum()
    }

    pub fn to_file(&self) -> KernelModelFile {
        let support = self.support();
        KernelModelFile {
            sigma: self.sigma,
            centers: support.iter().map(|&i| self.centers.point(i).to_vec()).collect(),
            weights: support.iter().map(|&i| self.weights[i]).collect(),
            support,
        }
    }

    pub fn from_file(file: &KernelModelFile) -> Result<Self> {
        if file.centers.len() != file.weights.len() {
            return Err(Error::DimensionMismatch { expected: file.centers.len(), found: file.weights.len() });
        }
        Ok(Self { centers: Samples::from_rows(&file.centers)?, sigma: file.sigma, weights: file.weights.clone() })
    }
}

/// Uniform weights `1/n`.
pub fn parzen(samples: &Samples, sigma: f64) -> Result<KernelModel> {
    check_sigma(sigma)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = samples.len();
    Ok(KernelModel { centers: samples.clone(), sigma, weights: vec![1.0 / n as f64; n] })
}

/// Default solver settings for the ISE problem: step `1 / (2 lambda_max(Sigma))`.
pub fn default_density_config() -> SolverConfig {
    SolverConfig {
        step: StepRule::FixedOverNormSq { c: 1.0 },
        max_iters: 3000,
        tol: 1e-6,
        init: Init::Zero,
        momentum: false,
        record_support: false,
    }
}

/// Settings for the `k`-sparse problem. On a support of size `k` the Gram
/// block has spectral norm at most `k * k_{sqrt(2) sigma}(0)` (Gershgorin), so
/// the step `1 / (2 k k_{sqrt(2) sigma}(0))` is safe on every iterate while
/// being far larger than the global one, which lets supports move between
/// clusters. Accelerated, started from zero.
pub fn sparse_density_config(k: usize, sigma: f64, point_dim: usize) -> Result<SolverConfig> {
    check_sigma(sigma)?;
    if k == 0 {
        return Err(Error::InvalidParameter("sparsity must be at least 1".into()));
    }
    let origin = vec![0.0; point_dim.max(1)];
    let peak = gaussian_kernel(&origin, &origin, std::f64::consts::SQRT_2 * sigma);
    Ok(SolverConfig {
        step: StepRule::Fixed { mu: 1.0 / (2.0 * k as f64 * peak) },
        momentum: true,
        ..default_density_config()
    })
}

/// Projected gradient on the ISE criterion. `spec` must be a unit-level simplex set.
pub fn estimate_density(
    samples: &Samples,
    sigma: f64,
    spec: ConstraintSpec,
    config: &SolverConfig,
) -> Result<(KernelModel, SolveTrace)> {
    let quad = build_ise_quadratic(samples, sigma)?;
    estimate_with_quadratic(samples, sigma, &quad.objective()?, spec, config)
}

/// As [`estimate_density`] with a prebuilt criterion, so several constraint
/// sets can share one Gram matrix.
pub fn estimate_with_quadratic(
    samples: &Samples,
    sigma: f64,
    objective: &Quadratic,
    spec: ConstraintSpec,
    config: &SolverConfig,
) -> Result<(KernelModel, SolveTrace)> {
    match spec {
        ConstraintSpec::SimplexConvex { lambda } | ConstraintSpec::SimplexSparse { lambda, .. } if lambda == 1.0 => {}
        other => {
            return Err(Error::InvalidParameter(format!("density weights need a unit simplex constraint, got {other:?}")))
        }
    }
    spec.validate(samples.len())?;
    let sol = minimize(objective, &spec, config)?;
    let weights = sol.x;
    Ok((KernelModel { centers: samples.clone(), sigma, weights }, sol.trace))
}

/// Deviation and mean of each component of the reference mixture:
/// `sigma_i = (7/9)^i`, `mean_i = 14 (sigma_i - 1)`, `i = 1..5`, equal weights.
pub fn reference_mixture_components() -> [(f64, f64); 5] {
    std::array::from_fn(|i| {
        let s = (7.0_f64 / 9.0).powi(i as i32 + 1);
        (14.0 * (s - 1.0), s)
    })
}

pub fn reference_mixture_pdf(x: f64) -> f64 {
    reference_mixture_components().iter().map(|(m, s)| gaussian_kernel_1d(x, *m, *s)).sum::<f64>() / 5.0
}

pub fn reference_mixture_mean() -> f64 {
    reference_mixture_components().iter().map(|(m, _)| m).sum::<f64>() / 5.0
}

/// Draws a component uniformly, then a Gaussian sample from it.
pub fn sample_reference_mixture(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps = reference_mixture_components();
    let normals: Vec<Normal<f64>> = comps.iter().map(|(m, s)| Normal::new(*m, *s).expect("positive deviation")).collect();
    (0..n).map(|_| normals[rng.random_range(0..comps.len())].sample(&mut rng)).collect()
}

/// Model density at each 1-D grid point.
pub fn evaluate_pdf(model: &KernelModel, grid: &[f64]) -> Vec<f64> {
    grid.par_iter().map(|&x| model.pdf(&[x])).collect()
}

/// Trapezoid integral of `(model - reference)^2` over an increasing grid.
pub fn ise_against<F: Fn(f64) -> f64 + Sync>(model: &KernelModel, reference: F, grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::InvalidParameter("integration grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("integration grid must be strictly increasing".into()));
    }
    let est = evaluate_pdf(model, grid);
    let sq: Vec<f64> = grid.iter().zip(&est).map(|(x, e)| (e - reference(*x)).powi(2)).collect();
    Ok(trapezoid(grid, &sq))
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

pub fn linspace(start: f64, end: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..points).map(|i| start + (end - start) * i as f64 / (points - 1) as f64).collect(),
    }
}

/// Weighted mean distance from each selected center to its nearest true mean.
pub fn weighted_cluster_distance(model: &KernelModel, means: &[f64]) -> f64 {
    let total: f64 = model.weights.iter().sum();
    model
        .support()
        .iter()
        .map(|&i| {
            let x = model.centers.point(i)[0];
            let d = means.iter().map(|m| (x - m).abs()).fold(f64::INFINITY, f64::min);
            model.weights[i] * d
        })
        .sum::<f64>()
        / total
}
