//! Spectral projectors for Hermitian matrices.
//!
//! The rank-`r`, unit-trace PSD projector reduces to the sparse simplex
//! projector on the eigenvalues: by unitary invariance and Mirsky's inequality
//! the optimal matrix shares the eigenvectors of the input, and its spectrum
//! is `gssp(eigenvalues, r, 1)`. The convex baselines (trace-ball projection
//! and the PSD nuclear-norm prox) are spectral maps as well.

use std::io::{BufRead, Read, Write};

use nalgebra::{ComplexField, DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::LinearOperator;
use crate::projections::{gssp, project_simplex};
use crate::solver::{minimize, Init, LeastSquares, Projector, Proximal, Solution, SolverConfig, StepRule};

/// Relative tolerance for the Hermitian check on construction.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Relative eigenvalue cut-off used for numerical rank.
pub const RANK_TOL: f64 = 1e-6;

/// Square matrix equal to its conjugate transpose. Real symmetric matrices use
/// `T = f64`, complex Hermitian ones `T = Complex64`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix<T: ComplexField<RealField = f64> = f64> {
    inner: DMatrix<T>,
}

impl<T: ComplexField<RealField = f64>> HermitianMatrix<T> {
    /// Checks `||M - M^H||_F <= 1e-10 ||M||_F` and stores the exact Hermitian part.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidParameter(format!("matrix is {} x {}, not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.clone().is_finite()) {
            return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
        }
        let adj = m.adjoint();
        let scale = m.norm();
        let asym = (&m - &adj).norm();
        if asym > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(if scale > 0.0 { asym / scale } else { f64::INFINITY }));
        }
        Ok(Self::from_parts_unchecked(m, adj))
    }

    fn from_parts_unchecked(m: DMatrix<T>, adj: DMatrix<T>) -> Self {
        let half = T::from_real(0.5);
        Self { inner: (m + adj) * half }
    }

    /// Symmetrizes without checking.
    pub fn hermitian_part(m: DMatrix<T>) -> Self {
        let adj = m.adjoint();
        Self::from_parts_unchecked(m, adj)
    }

    pub fn zeros(d: usize) -> Self {
        Self { inner: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.inner
    }

    pub fn trace(&self) -> f64 {
        self.inner.diagonal().iter().map(|v| v.clone().real()).sum()
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        (&self.inner - &other.inner).norm()
    }

    /// Eigenvalues in decomposition order and the matching eigenvector columns.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<T>) {
        let eig = SymmetricEigen::new(self.inner.clone());
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    }

    /// `sum_j values[j] u_j u_j^H` over the nonzero `values`.
    fn reconstruct(vectors: &DMatrix<T>, values: &[f64]) -> Self {
        let d = vectors.nrows();
        let keep: Vec<usize> = (0..values.len()).filter(|&j| values[j] != 0.0).collect();
        if keep.is_empty() {
            return Self::zeros(d);
        }
        let u = vectors.select_columns(&keep);
        let mut scaled = u.clone();
        for (c, &j) in keep.iter().enumerate() {
            let s = T::from_real(values[j]);
            scaled.column_mut(c).iter_mut().for_each(|v| *v = v.clone() * s.clone());
        }
        Self::hermitian_part(scaled * u.adjoint())
    }
}

impl HermitianMatrix<f64> {
    /// From a row-major real buffer.
    pub fn from_row_major(d: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, found: data.len() });
        }
        Self::new(DMatrix::from_row_slice(d, d, data))
    }

    /// Row-major buffer (equal to the column-major one for symmetric matrices).
    pub fn to_row_major(&self) -> Vec<f64> {
        self.inner.transpose().as_slice().to_vec()
    }
}

/// Output of the rank/trace projector.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixEstimate<T: ComplexField<RealField = f64> = f64> {
    pub matrix: HermitianMatrix<T>,
    pub rank_used: usize,
    /// Nonzero eigenvalues of `matrix`, in decomposition order.
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
}

/// Nearest PSD matrix with rank at most `r` and unit trace.
pub fn project_rank_trace<T: ComplexField<RealField = f64>>(
    w: &HermitianMatrix<T>,
    r: usize,
) -> Result<DensityMatrixEstimate<T>> {
    let d = w.dim();
    if r == 0 || r > d {
        return Err(Error::RankOutOfRange { r, dim: d });
    }
    let (values, vectors) = w.eigen();
    let projected = gssp(&values, r, 1.0)?.beta.to_dense();
    let matrix = HermitianMatrix::reconstruct(&vectors, &projected);
    let eigenvalues: Vec<f64> = projected.iter().copied().filter(|v| *v != 0.0).collect();
    Ok(DensityMatrixEstimate {
        trace: eigenvalues.iter().sum(),
        rank_used: eigenvalues.len(),
        eigenvalues,
        matrix,
    })
}

/// As [`project_rank_trace`] for real symmetric input, computing only the
/// `r` leading eigenpairs: Householder tridiagonalization, Sturm bisection for
/// the eigenvalues and inverse iteration for the eigenvectors.
pub fn project_rank_trace_partial(w: &HermitianMatrix<f64>, r: usize) -> Result<DensityMatrixEstimate<f64>> {
    let d = w.dim();
    if r == 0 || r > d {
        return Err(Error::RankOutOfRange { r, dim: d });
    }
    let (values, vectors) = leading_eigenpairs(w.as_matrix(), r);
    let projected = gssp(&values, r, 1.0)?.beta.to_dense();
    let matrix = HermitianMatrix::reconstruct(&vectors, &projected);
    let eigenvalues: Vec<f64> = projected.iter().copied().filter(|v| *v != 0.0).collect();
    Ok(DensityMatrixEstimate {
        trace: eigenvalues.iter().sum(),
        rank_used: eigenvalues.len(),
        eigenvalues,
        matrix,
    })
}

/// The `r` largest eigenvalues (descending) of a symmetric matrix and an
/// orthonormal set of matching eigenvectors.
pub fn leading_eigenpairs(m: &DMatrix<f64>, r: usize) -> (Vec<f64>, DMatrix<f64>) {
    let d = m.nrows();
    let (q, diag, off) = nalgebra::linalg::SymmetricTridiagonal::new(m.clone()).unpack();
    let diag: Vec<f64> = diag.iter().copied().collect();
    let off: Vec<f64> = off.iter().copied().collect();
    let scale = (0..d)
        .map(|i| diag[i].abs() + if i > 0 { off[i - 1].abs() } else { 0.0 } + off.get(i).map_or(0.0, |v| v.abs()))
        .fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return (vec![0.0; r], q.columns(0, r).into_owned());
    }
    let values: Vec<f64> = (0..r).map(|j| tridiagonal_eigenvalue(&diag, &off, d - 1 - j, scale)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x7e1d);
    let cluster_gap = 1e-3 * scale;
    let mut tri_vectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    for (j, &lambda) in values.iter().enumerate() {
        let cluster: Vec<usize> = (0..j).filter(|&i| (values[i] - lambda).abs() <= cluster_gap).collect();
        let shift = lambda + f64::EPSILON * scale * (1.0 + cluster.len() as f64);
        let lu = TridiagonalLu::new(&diag, &off, shift, scale);
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v);
        for _ in 0..4 {
            lu.solve(&mut v);
            for &i in &cluster {
                let dot: f64 = v.iter().zip(&tri_vectors[i]).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(&tri_vectors[i]).for_each(|(a, b)| *a -= dot * b);
            }
            normalize(&mut v);
        }
        tri_vectors.push(v);
    }
    let t = DMatrix::from_fn(d, r, |i, j| tri_vectors[j][i]);
    (values, q * t)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().enumerate().for_each(|(i, x)| *x = if i == 0 { 1.0 } else { 0.0 });
    }
}

/// Eigenvalues of the tridiagonal matrix below `x` (Sturm sequence count).
fn sturm_count(diag: &[f64], off: &[f64], x: f64, pivot_floor: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let coupling = if i > 0 { off[i - 1] * off[i - 1] / q } else { 0.0 };
        q = diag[i] - x - coupling;
        if q.abs() < pivot_floor {
            q = -pivot_floor;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// The `index`-th smallest eigenvalue (0-based) by bisection.
fn tridiagonal_eigenvalue(diag: &[f64], off: &[f64], index: usize, scale: f64) -> f64 {
    let floor = f64::MIN_POSITIVE.sqrt() * scale;
    let (mut lo, mut hi) = (-scale, scale);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 2.0 * f64::EPSILON * scale {
            break;
        }
        if sturm_count(diag, off, mid, floor) > index {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// LU factorization with partial pivoting of `T - shift I`, `T` symmetric tridiagonal.
struct TridiagonalLu {
    dl: Vec<f64>,
    dd: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn new(diag: &[f64], off: &[f64], shift: f64, scale: f64) -> Self {
        let n = diag.len();
        let mut dl = off.to_vec();
        let mut dd: Vec<f64> = diag.iter().map(|v| v - shift).collect();
        let mut du = off.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if dd[i].abs() >= dl[i].abs() {
                if dd[i] != 0.0 {
                    let fact = dl[i] / dd[i];
                    dl[i] = fact;
                    dd[i + 1] -= fact * du[i];
                }
            } else {
                let fact = dd[i] / dl[i];
                dd[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = dd[i + 1];
                dd[i + 1] = temp - fact * dd[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        // a singular factor is expected at an exact eigenvalue
        let tiny = f64::EPSILON * scale;
        dd.iter_mut().filter(|v| v.abs() < tiny).for_each(|v| *v = if *v < 0.0 { -tiny } else { tiny });
        Self { dl, dd, du, du2, swapped }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.dd[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.dd[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.dd[i];
        }
    }
}

/// Spectrum of the rank/trace projection of `w` and the squared distance
/// computed in eigenvalue space.
pub fn eigenvalue_projection_distance<T: ComplexField<RealField = f64>>(w: &HermitianMatrix<T>, r: usize) -> Result<f64> {
    let (values, _) = w.eigen();
    Ok(gssp(&values, r, 1.0)?.distance_sq)
}

/// Projection onto `{X >= 0, tr X <= 1}`.
pub fn project_psd_traceball<T: ComplexField<RealField = f64>>(w: &HermitianMatrix<T>) -> HermitianMatrix<T> {
    let (values, vectors) = w.eigen();
    let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let spectrum = if clipped.iter().sum::<f64>() <= 1.0 {
        clipped
    } else {
        project_simplex(&clipped, 1.0).expect("finite spectrum").0
    };
    HermitianMatrix::reconstruct(&vectors, &spectrum)
}

/// Prox of `t * tr(X) + indicator(X >= 0)`: eigenvalues map to `max(v - t, 0)`.
pub fn prox_nuclear_psd<T: ComplexField<RealField = f64>>(w: &HermitianMatrix<T>, t: f64) -> Result<HermitianMatrix<T>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("threshold {t} must be positive")));
    }
    let (values, vectors) = w.eigen();
    let shrunk: Vec<f64> = values.iter().map(|v| (v - t).max(0.0)).collect();
    Ok(HermitianMatrix::reconstruct(&vectors, &shrunk))
}

/// Eigenvalues above `RANK_TOL` times the largest.
pub fn numerical_rank(eigenvalues: &[f64]) -> usize {
    let top = eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if top <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&v| v > RANK_TOL * top).count()
}

fn symmetric_from_buffer(d: usize, v: &[f64]) -> Result<HermitianMatrix<f64>> {
    if v.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, found: v.len() });
    }
    Ok(HermitianMatrix::hermitian_part(DMatrix::from_row_slice(d, d, v)))
}

/// Rank/trace projector on row-major `d x d` buffers.
#[derive(Debug, Clone, Copy)]
pub struct RankTraceProjector {
    pub d: usize,
    pub r: usize,
}

impl Projector for RankTraceProjector {
    fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(project_rank_trace_partial(&symmetric_from_buffer(self.d, v)?, self.r)?.matrix.to_row_major())
    }
}

/// Trace-ball projector on row-major `d x d` buffers.
#[derive(Debug, Clone, Copy)]
pub struct TraceBallProjector {
    pub d: usize,
}

impl Projector for TraceBallProjector {
    fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(project_psd_traceball(&symmetric_from_buffer(self.d, v)?).to_row_major())
    }
}

/// Prox of `weight * tr(X)` over the PSD cone, on row-major `d x d` buffers.
#[derive(Debug, Clone, Copy)]
pub struct NuclearPsdProx {
    pub d: usize,
    pub weight: f64,
}

impl Proximal for NuclearPsdProx {
    fn prox(&self, v: &[f64], step: f64) -> Result<Vec<f64>> {
        let w = symmetric_from_buffer(self.d, v)?;
        if self.weight == 0.0 {
            let (values, vectors) = w.eigen();
            let clipped: Vec<f64> = values.iter().map(|x| x.max(0.0)).collect();
            return Ok(HermitianMatrix::reconstruct(&vectors, &clipped).to_row_major());
        }
        Ok(prox_nuclear_psd(&w, step * self.weight)?.to_row_major())
    }
}

/// `G G^T / tr(G G^T)` with `G` a `d x r` standard Gaussian matrix.
pub fn random_density_matrix(d: usize, r: usize, seed: u64) -> Result<HermitianMatrix<f64>> {
    if r == 0 || r > d {
        return Err(Error::RankOutOfRange { r, dim: d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: DMatrix<f64> = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
    let x = &g * g.transpose();
    let tr = x.trace();
    Ok(HermitianMatrix::hermitian_part(x / tr))
}

/// Settings for the rank-targeting search over the nuclear-norm weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketingConfig {
    /// Geometric grid size between `lambda_max` and `lambda_max * min_ratio`.
    pub grid_points: usize,
    pub min_ratio: f64,
    /// Bisection steps after the grid brackets the target rank.
    pub refinements: usize,
    /// Inner proximal-gradient settings (warm starts are managed internally).
    pub solver: SolverConfig,
}

impl Default for BracketingConfig {
    fn default() -> Self {
        Self {
            grid_points: 20,
            min_ratio: 1e-4,
            refinements: 6,
            solver: SolverConfig {
                step: StepRule::FixedOverNormSq { c: 1.0 },
                max_iters: 3000,
                tol: 1e-5,
                init: Init::Zero,
                momentum: true,
                record_support: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketingOutcome {
    /// Trace-normalized solution.
    pub estimate: DensityMatrixEstimate<f64>,
    pub lambda: f64,
    /// Numerical rank before normalization.
    pub rank: usize,
    /// False when no weight produced exactly the target rank.
    pub exact_rank: bool,
    /// `(lambda, rank)` for every solve, in evaluation order.
    pub probes: Vec<(f64, usize)>,
    /// Total proximal-gradient iterations across all solves.
    pub iterations: usize,
    pub iteration_seconds: Vec<f64>,
}

/// Solves `min_{X >= 0} ||A(X) - y||^2 + lambda tr(X)` by proximal gradient.
pub fn solve_nuclear_psd<A: LinearOperator + ?Sized>(
    op: &A,
    op_norm: f64,
    y: &[f64],
    d: usize,
    lambda: f64,
    config: &SolverConfig,
) -> Result<Solution> {
    let objective = LeastSquares::with_norm(op, y, op_norm)?;
    minimize(&objective, &NuclearPsdProx { d, weight: lambda }, config)
}

/// Searches the nuclear-norm weight for the smallest value whose solution
/// still has numerical rank `r`, then rescales that solution to unit trace.
///
/// The weight is scanned downwards over a geometric grid starting at
/// `lambda_max = 2 lambda_max(A^T y)`, above which the solution is zero. The
/// first bracket `[rank > r, rank <= r]` is refined by geometric bisection.
/// If the rank never exceeds `r` the smallest grid weight with rank `r` is used.
pub fn lambda_bracketing_solve<A: LinearOperator + ?Sized>(
    op: &A,
    op_norm: f64,
    y: &[f64],
    d: usize,
    r: usize,
    config: &BracketingConfig,
) -> Result<BracketingOutcome> {
    if r == 0 || r > d {
        return Err(Error::RankOutOfRange { r, dim: d });
    }
    if config.grid_points < 2 || !(config.min_ratio > 0.0 && config.min_ratio < 1.0) {
        return Err(Error::InvalidParameter("bracketing grid needs >= 2 points and 0 < min_ratio < 1".into()));
    }
    let back = symmetric_from_buffer(d, &op.adjoint(y))?;
    let (spectrum, _) = back.eigen();
    let lambda_max = 2.0 * spectrum.iter().copied().fold(0.0_f64, f64::max);
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidParameter("A^T y has no positive eigenvalue".into()));
    }

    let mut probes = Vec::new();
    let mut iterations = 0usize;
    let mut iteration_seconds = Vec::new();
    let mut warm = vec![0.0; d * d];
    let mut solve = |lambda: f64, warm: &[f64]| -> Result<(Vec<f64>, usize)> {
        let mut cfg = config.solver.clone();
        cfg.init = Init::Warm(warm.to_vec());
        let sol = solve_nuclear_psd(op, op_norm, y, d, lambda, &cfg)?;
        iterations += sol.trace.iterations();
        iteration_seconds.extend_from_slice(&sol.trace.iteration_seconds);
        let (values, _) = symmetric_from_buffer(d, &sol.x)?.eigen();
        Ok((sol.x, numerical_rank(&values)))
    };

    // (lambda, rank, solution) of every solve
    let mut solved: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    let mut bracket: Option<(f64, f64)> = None;
    let mut above = lambda_max;
    for j in 0..config.grid_points {
        let lambda = lambda_max * config.min_ratio.powf(j as f64 / (config.grid_points - 1) as f64);
        let (x, rank) = solve(lambda, &warm)?;
        probes.push((lambda, rank));
        warm.clone_from(&x);
        solved.push((lambda, rank, x));
        if rank > r {
            bracket = Some((lambda, above));
            break;
        }
        above = lambda;
    }

    if let Some((mut lo, mut hi)) = bracket {
        for _ in 0..config.refinements {
            let mid = (lo * hi).sqrt();
            let start = solved
                .iter()
                .min_by(|a, b| (a.0.ln() - mid.ln()).abs().total_cmp(&(b.0.ln() - mid.ln()).abs()))
                .map(|s| s.2.clone())
                .unwrap_or_else(|| vec![0.0; d * d]);
            let (x, rank) = solve(mid, &start)?;
            probes.push((mid, rank));
            solved.push((mid, rank, x));
            if rank > r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    let ranks_monotone = {
        let mut sorted: Vec<&(f64, usize, Vec<f64>)> = solved.iter().collect();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        sorted.windows(2).all(|w| w[0].1 <= w[1].1)
    };
    if !ranks_monotone {
        log::debug!("numerical rank is not monotone in lambda over probes {probes:?}");
    }

    let exact = solved.iter().filter(|s| s.1 == r).min_by(|a, b| a.0.total_cmp(&b.0));
    let (chosen, exact_rank) = match exact {
        Some(s) => (s, true),
        None => {
            let nearest = solved
                .iter()
                .filter(|s| s.1 > 0)
                .min_by(|a, b| a.1.abs_diff(r).cmp(&b.1.abs_diff(r)).then(a.0.total_cmp(&b.0)))
                .ok_or_else(|| Error::InvalidParameter("every probed weight gave the zero solution".into()))?;
            log::warn!("no weight produced rank {r}; using rank {} at lambda {}", nearest.1, nearest.0);
            (nearest, false)
        }
    };
    let (lambda, rank, x) = chosen;
    let unnormalized = symmetric_from_buffer(d, x)?;
    let tr = unnormalized.trace();
    let matrix = HermitianMatrix::hermitian_part(unnormalized.into_matrix() / tr);
    let (values, _) = matrix.eigen();
    let cutoff = RANK_TOL * values.iter().copied().fold(0.0_f64, f64::max);
    let eigenvalues: Vec<f64> = values.into_iter().filter(|v| *v > cutoff).collect();
    Ok(BracketingOutcome {
        estimate: DensityMatrixEstimate { rank_used: *rank, trace: matrix.trace(), eigenvalues, matrix },
        lambda: *lambda,
        rank: *rank,
        exact_rank,
        probes,
        iterations,
        iteration_seconds,
    })
}

/// Binary blob header magic.
pub const BLOB_MAGIC: [u8; 4] = *b"HMAT";

/// Matrix read back from a binary blob.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixBlob {
    Real(DMatrix<f64>),
    Complex(DMatrix<Complex64>),
}

const DTYPE_F64: u32 = 1;
const DTYPE_C64: u32 = 2;

/// 16-byte header (`HMAT`, `d: u64`, `dtype: u32`), then row-major
/// little-endian `f64` entries.
pub fn write_blob_real<W: Write>(m: &DMatrix<f64>, mut out: W) -> Result<()> {
    write_header(&mut out, m.nrows(), m.ncols(), DTYPE_F64)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// As [`write_blob_real`], entries as interleaved `(re, im)` pairs.
pub fn write_blob_complex<W: Write>(m: &DMatrix<Complex64>, mut out: W) -> Result<()> {
    write_header(&mut out, m.nrows(), m.ncols(), DTYPE_C64)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].re.to_le_bytes())?;
            out.write_all(&m[(i, j)].im.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_header<W: Write>(out: &mut W, rows: usize, cols: usize, dtype: u32) -> Result<()> {
    if rows != cols {
        return Err(Error::InvalidParameter("blob format stores square matrices".into()));
    }
    out.write_all(&BLOB_MAGIC)?;
    out.write_all(&(rows as u64).to_le_bytes())?;
    out.write_all(&dtype.to_le_bytes())?;
    Ok(())
}

pub fn read_blob<R: Read>(mut input: R) -> Result<MatrixBlob> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if header[..4] != BLOB_MAGIC {
        return Err(Error::Parse("bad matrix blob magic".into()));
    }
    let d = u64::from_le_bytes(header[4..12].try_into().expect("8 bytes")) as usize;
    let dtype = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes"));
    let mut next = || -> Result<f64> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    match dtype {
        DTYPE_F64 => {
            let data = (0..d * d).map(|_| next()).collect::<Result<Vec<_>>>()?;
            Ok(MatrixBlob::Real(DMatrix::from_row_slice(d, d, &data)))
        }
        DTYPE_C64 => {
            let data = (0..d * d)
                .map(|_| Ok(Complex64::new(next()?, next()?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(MatrixBlob::Complex(DMatrix::from_row_slice(d, d, &data)))
        }
        other => Err(Error::Parse(format!("unknown dtype {other}"))),
    }
}

/// Dense row-major CSV, one matrix row per line.
pub fn write_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!("line {}: ragged row", n + 1)));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}
