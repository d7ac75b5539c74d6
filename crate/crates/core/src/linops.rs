//! Linear measurement operators and their generators.
//!
//! Operators act on flat `f64` buffers. Matrix-valued domains (the Pauli
//! ensemble) use row-major `d x d` buffers.

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, Error, Result};
use crate::numeric::{dot, norm, norm_sq};

/// A real linear map `R^input_dim -> R^output_dim` with its adjoint.
pub trait LinearOperator: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// `out = A x`
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    /// `out = A^T y`
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        self.adjoint_into(y, &mut out);
        out
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Box<T> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        (**self).adjoint_into(y, out)
    }
}

/// Explicit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(p: usize) -> Self {
        Self { matrix: DMatrix::identity(p, p) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Same operator with columns reordered: column `j` of the result is
    /// column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let cols: Vec<_> = perm.iter().map(|&j| self.matrix.column(j).into_owned()).collect();
        Self { matrix: DMatrix::from_columns(&cols) }
    }
}

impl LinearOperator for DenseOperator {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let xv = DVectorView::from_slice(x, self.matrix.ncols());
        let mut ov = DVectorViewMut::from_slice(out, self.matrix.nrows());
        ov.gemv(1.0, &self.matrix, &xv, 0.0);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let yv = DVectorView::from_slice(y, self.matrix.nrows());
        let mut ov = DVectorViewMut::from_slice(out, self.matrix.ncols());
        ov.gemv_tr(1.0, &self.matrix, &yv, 0.0);
    }
}

/// Row blocks `[A_1; A_2; ...]` sharing one input space.
pub struct StackedOperator {
    blocks: Vec<Box<dyn LinearOperator>>,
}

impl StackedOperator {
    pub fn new(blocks: Vec<Box<dyn LinearOperator>>) -> Result<Self> {
        let first = blocks.first().ok_or(Error::EmptyInput)?.input_dim();
        for b in &blocks {
            if b.input_dim() != first {
                return Err(Error::DimensionMismatch { expected: first, found: b.input_dim() });
            }
        }
        Ok(Self { blocks })
    }
}

impl LinearOperator for StackedOperator {
    fn input_dim(&self) -> usize {
        self.blocks[0].input_dim()
    }

    fn output_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.output_dim()).sum()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let mut offset = 0;
        for b in &self.blocks {
            let m = b.output_dim();
            b.apply_into(x, &mut out[offset..offset + m]);
            offset += m;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut scratch = vec![0.0; out.len()];
        let mut offset = 0;
        for b in &self.blocks {
            let m = b.output_dim();
            b.adjoint_into(&y[offset..offset + m], &mut scratch);
            out.iter_mut().zip(&scratch).for_each(|(o, s)| *o += s);
            offset += m;
        }
    }
}

/// iid standard normal `m x p` matrix, optionally with unit-norm columns.
pub fn gaussian_matrix(m: usize, p: usize, column_normalized: bool, seed: u64) -> Result<DenseOperator> {
    if m == 0 || p == 0 {
        return Err(Error::InvalidParameter(format!("matrix shape {m} x {p} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    if column_normalized {
        for mut col in matrix.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
    }
    Ok(DenseOperator { matrix })
}

/// One Pauli string stored by its bit masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PauliString {
    /// Base-4 code, qubit 0 most significant; digits 0=I, 1=X, 2=Y, 3=Z.
    pub code: u64,
    /// Bits flipped between row and column (X or Y factors).
    x_mask: usize,
    /// Bits contributing a sign (Z or Y factors).
    z_mask: usize,
    /// Number of Y factors; the global phase is `(-i)^y_count`.
    y_count: u32,
}

impl PauliString {
    pub fn from_code(code: u64, qubits: u32) -> Self {
        let (mut x_mask, mut z_mask, mut y_count) = (0usize, 0usize, 0u32);
        for q in 0..qubits {
            let digit = (code >> (2 * (qubits - 1 - q))) & 3;
            let bit = 1usize << (qubits - 1 - q);
            match digit {
                1 => x_mask |= bit,
                2 => {
                    x_mask |= bit;
                    z_mask |= bit;
                    y_count += 1;
                }
                3 => z_mask |= bit,
                _ => {}
            }
        }
        Self { code, x_mask, z_mask, y_count }
    }

    /// Letters, qubit 0 first.
    pub fn label(&self, qubits: u32) -> String {
        (0..qubits)
            .map(|q| match (self.code >> (2 * (qubits - 1 - q))) & 3 {
                0 => 'I',
                1 => 'X',
                2 => 'Y',
                _ => 'Z',
            })
            .collect()
    }

    fn phase(&self) -> Complex64 {
        match self.y_count % 4 {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, -1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, 1.0),
        }
    }

    #[inline]
    fn sign(&self, row: usize) -> f64 {
        if (row & self.z_mask).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Dense `d x d` matrix; row `a` has its single nonzero at column `a ^ x_mask`.
    pub fn to_dense(&self, qubits: u32) -> DMatrix<Complex64> {
        let d = 1usize << qubits;
        let phase = self.phase();
        let mut m = DMatrix::zeros(d, d);
        for a in 0..d {
            m[(a, a ^ self.x_mask)] = phase * self.sign(a);
        }
        m
    }
}

/// Random Pauli measurements `A(X)_i = scale * tr(E_i X)` on `d x d` matrices,
/// `d = 2^qubits`, with `scale = 1/sqrt(m)`.
///
/// The real interface acts on row-major real `d x d` buffers through the real
/// part of each observable (exact for symmetric inputs). Observables with an
/// odd number of Y factors are imaginary and measure zero there.
#[derive(Debug, Clone)]
pub struct PauliEnsemble {
    qubits: u32,
    observables: Vec<PauliString>,
    scale: f64,
}

impl PauliEnsemble {
    /// `m` distinct observables drawn uniformly from all `4^qubits`.
    pub fn random(qubits: u32, m: usize, seed: u64) -> Result<Self> {
        if qubits == 0 || qubits > 15 {
            return Err(Error::InvalidParameter(format!("qubit count {qubits} out of range 1..=15")));
        }
        let total = 1usize << (2 * qubits);
        if m == 0 || m > total {
            return Err(Error::InvalidParameter(format!("m = {m} must be in 1..={total}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = rand::seq::index::sample(&mut rng, total, m);
        let observables = codes.iter().map(|c| PauliString::from_code(c as u64, qubits)).collect();
        Ok(Self { qubits, observables, scale: 1.0 / (m as f64).sqrt() })
    }

    /// Explicit observable list (codes as in [`PauliString::code`]).
    pub fn from_codes(qubits: u32, codes: &[u64], scale: f64) -> Result<Self> {
        let total = 1u64 << (2 * qubits);
        if let Some(&c) = codes.iter().find(|&&c| c >= total) {
            return Err(Error::InvalidParameter(format!("Pauli code {c} out of range")));
        }
        let observables = codes.iter().map(|&c| PauliString::from_code(c, qubits)).collect();
        Ok(Self { qubits, observables, scale })
    }

    pub fn qubits(&self) -> u32 {
        self.qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.qubits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn observables(&self) -> &[PauliString] {
        &self.observables
    }

    /// `scale * Re tr(E_i X)` for a complex Hermitian `X`.
    pub fn apply_hermitian(&self, x: &DMatrix<Complex64>) -> Vec<f64> {
        let d = self.dim();
        self.observables
            .iter()
            .map(|e| {
                let phase = e.phase();
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..d {
                    acc += x[(a ^ e.x_mask, a)] * e.sign(a);
                }
                self.scale * (phase * acc).re
            })
            .collect()
    }

    /// `scale * sum_i y_i E_i`.
    pub fn adjoint_hermitian(&self, y: &[f64]) -> DMatrix<Complex64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for (e, &yi) in self.observables.iter().zip(y) {
            let c = e.phase() * (self.scale * yi);
            for a in 0..d {
                out[(a, a ^ e.x_mask)] += c * e.sign(a);
            }
        }
        out
    }

    fn real_phase(e: &PauliString) -> f64 {
        match e.y_count % 4 {
            0 => 1.0,
            2 => -1.0,
            _ => 0.0,
        }
    }
}

impl LinearOperator for PauliEnsemble {
    fn input_dim(&self) -> usize {
        self.dim() * self.dim()
    }

    fn output_dim(&self) -> usize {
        self.observables.len()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (e, o) in self.observables.iter().zip(out.iter_mut()) {
            let phase = Self::real_phase(e);
            if phase == 0.0 {
                *o = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for a in 0..d {
                acc += e.sign(a) * x[(a ^ e.x_mask) * d + a];
            }
            *o = self.scale * phase * acc;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (e, &yi) in self.observables.iter().zip(y) {
            let c = self.scale * Self::real_phase(e) * yi;
            if c == 0.0 {
                continue;
            }
            for a in 0..d {
                out[(a ^ e.x_mask) * d + a] += c * e.sign(a);
            }
        }
    }
}

/// Power-method estimate of the spectral norm `||A||` via `A^T A`.
pub fn operator_norm<A: LinearOperator + ?Sized>(op: &A, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..op.input_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&x);
    x.iter_mut().for_each(|v| *v /= n);
    let mut image = vec![0.0; op.output_dim()];
    let mut back = vec![0.0; op.input_dim()];
    let mut previous = 0.0_f64;
    for _ in 0..iters.max(1) {
        op.apply_into(&x, &mut image);
        op.adjoint_into(&image, &mut back);
        let rayleigh = dot(&x, &back);
        let bn = norm(&back);
        if bn == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&back).for_each(|(v, b)| *v = b / bn);
        if (rayleigh - previous).abs() < 1e-8 * rayleigh.abs() {
            previous = rayleigh;
            break;
        }
        previous = rayleigh;
    }
    previous.max(0.0).sqrt()
}

/// Additive white Gaussian noise at a target SNR (dB) over the whole vector:
/// `E||eta||^2 = ||y||^2 / 10^(snr/10)`. Infinite SNR returns `y` unchanged.
pub fn add_noise_snr(y_clean: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    check_finite(y_clean)?;
    if snr_db.is_nan() {
        return Err(Error::InvalidParameter("SNR is NaN".into()));
    }
    let energy = norm_sq(y_clean);
    if energy == 0.0 {
        return Err(Error::ZeroSignal);
    }
    if snr_db == f64::INFINITY {
        return Ok(y_clean.to_vec());
    }
    let sigma = (energy / (y_clean.len() as f64 * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y_clean.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Monte-Carlo lower bound on the `k`-RIP constant: the largest observed
/// `| ||A x||^2 - 1 |` over random unit-norm `k`-sparse `x`.
pub fn estimate_rip_constant<A: LinearOperator + ?Sized>(op: &A, k: usize, trials: usize, seed: u64) -> Result<f64> {
    let p = op.input_dim();
    if k == 0 || k > p {
        return Err(Error::SparsityOutOfRange { k, dim: p });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; p];
    let mut image = vec![0.0; op.output_dim()];
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        x.iter_mut().for_each(|v| *v = 0.0);
        let support = rand::seq::index::sample(&mut rng, p, k);
        for i in support.iter() {
            x[i] = rng.sample(StandardNormal);
        }
        let n = norm(&x);
        if n == 0.0 {
            continue;
        }
        x.iter_mut().for_each(|v| *v /= n);
        op.apply_into(&x, &mut image);
        worst = worst.max((norm_sq(&image) - 1.0).abs());
    }
    Ok(worst)
}

/// Observation noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    None,
    GaussianSnr { db: f64 },
}

/// `y = A(x*) + eta`.
pub struct MeasurementModel<A: LinearOperator> {
    pub operator: A,
    pub y: Vec<f64>,
    pub noise: Noise,
}

impl<A: LinearOperator> MeasurementModel<A> {
    pub fn observe(operator: A, truth: &[f64], noise: Noise, seed: u64) -> Result<Self> {
        if truth.len() != operator.input_dim() {
            return Err(Error::DimensionMismatch { expected: operator.input_dim(), found: truth.len() });
        }
        let clean = operator.apply(truth);
        let y = match noise {
            Noise::None => clean,
            Noise::GaussianSnr { db } => add_noise_snr(&clean, db, seed)?,
        };
        Ok(Self { operator, y, noise })
    }
}
