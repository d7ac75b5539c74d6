//! Exact Euclidean projectors onto sparse simplex and sparse hyperplane sets.
//!
//! The sparse problems split into a combinatorial support choice and a convex
//! projection of the restricted vector. [`gssp`] picks the `k` largest signed
//! entries and projects them onto the simplex; [`gshp`] seeds with the entry
//! that maximizes `lambda * w_i` and grows the support one index at a time by
//! taking the entry farthest from the level-adjusted mean of the current
//! support. Both return the global minimizer of `||beta - w||_2`.
//!
//! Ties are always resolved in favour of the lowest index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::numeric::compensated_sum;

/// A vector stored by its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    /// Builds a sparse vector; `support` must be strictly increasing and in range.
    pub fn new(dim: usize, support: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), found: values.len() });
        }
        for w in support.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidParameter("support must be strictly increasing".into()));
            }
        }
        if let Some(&last) = support.last() {
            if last >= dim {
                return Err(Error::IndexOutOfBounds { index: last, dim });
            }
        }
        Ok(Self { dim, support, values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, support: Vec::new(), values: Vec::new() }
    }

    /// Keeps the nonzero entries of a dense vector.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (support, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { dim: dense.len(), support, values }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.support.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of stored nonzeros.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.values.iter().copied())
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.support.binary_search(&index) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    /// Drops explicitly stored zeros.
    fn pruned(mut self) -> Self {
        let mut keep = 0;
        for j in 0..self.support.len() {
            if self.values[j] != 0.0 {
                self.support[keep] = self.support[j];
                self.values[keep] = self.values[j];
                keep += 1;
            }
        }
        self.support.truncate(keep);
        self.values.truncate(keep);
        self
    }
}

/// Target set for a projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// `k`-sparse vectors on the simplex `{b >= 0, sum b = lambda}`.
    SimplexSparse { k: usize, lambda: f64 },
    /// `k`-sparse vectors on the hyperplane `{sum b = lambda}`.
    HyperplaneSparse { k: usize, lambda: f64 },
    SimplexConvex { lambda: f64 },
    HyperplaneConvex { lambda: f64 },
    /// `k`-sparse vectors, no level constraint.
    SparsityOnly { k: usize },
}

impl ConstraintSpec {
    pub fn sparsity(&self) -> Option<usize> {
        match *self {
            Self::SimplexSparse { k, .. } | Self::HyperplaneSparse { k, .. } | Self::SparsityOnly { k } => {
                Some(k)
            }
            _ => None,
        }
    }

    pub fn level(&self) -> Option<f64> {
        match *self {
            Self::SimplexSparse { lambda, .. }
            | Self::HyperplaneSparse { lambda, .. }
            | Self::SimplexConvex { lambda }
            | Self::HyperplaneConvex { lambda } => Some(lambda),
            Self::SparsityOnly { .. } => None,
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self, Self::SimplexConvex { .. } | Self::HyperplaneConvex { .. })
    }

    /// Checks the parameters against a dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        if let Some(k) = self.sparsity() {
            if k == 0 || k > p {
                return Err(Error::SparsityOutOfRange { k, dim: p });
            }
        }
        match *self {
            Self::SimplexSparse { lambda, .. } | Self::SimplexConvex { lambda } if !(lambda > 0.0) => {
                Err(Error::NonPositiveLevel(lambda))
            }
            _ => match self.level() {
                Some(l) if !l.is_finite() => Err(Error::InvalidParameter(format!("level {l} is not finite"))),
                _ => Ok(()),
            },
        }
    }

    pub fn project(&self, w: &[f64]) -> Result<ProjectionResult> {
        match *self {
            Self::SimplexSparse { k, lambda } => gssp(w, k, lambda),
            Self::HyperplaneSparse { k, lambda } => gshp(w, k, lambda),
            Self::SimplexConvex { lambda } => {
                let (beta, tau) = project_simplex(w, lambda)?;
                let support: Vec<usize> = (0..w.len()).collect();
                let objective = simplex_objective(w, &support, &beta, tau);
                Ok(ProjectionResult::assemble(w, support, beta, tau, objective))
            }
            Self::HyperplaneConvex { lambda } => {
                let (beta, tau) = project_hyperplane(w, lambda)?;
                let support: Vec<usize> = (0..w.len()).collect();
                let objective = set_function_hyperplane(w, &support, lambda)?;
                Ok(ProjectionResult::assemble(w, support, beta, tau, objective))
            }
            Self::SparsityOnly { k } => {
                let support = top_k_magnitude_indices(w, k)?;
                let values: Vec<f64> = support.iter().map(|&i| w[i]).collect();
                let objective = values.iter().map(|v| v * v).sum();
                Ok(ProjectionResult::assemble(w, support, values, 0.0, objective))
            }
        }
    }

    /// Membership test with an absolute tolerance on the level constraint.
    pub fn is_feasible(&self, beta: &[f64], tol: f64) -> bool {
        if beta.iter().any(|v| !v.is_finite()) {
            return false;
        }
        if let Some(k) = self.sparsity() {
            if beta.iter().filter(|v| **v != 0.0).count() > k {
                return false;
            }
        }
        if matches!(self, Self::SimplexSparse { .. } | Self::SimplexConvex { .. })
            && beta.iter().any(|v| *v < 0.0)
        {
            return false;
        }
        match self.level() {
            Some(lambda) => (compensated_sum(beta.iter().copied()) - lambda).abs() <= tol * (1.0 + lambda.abs()),
            None => true,
        }
    }
}

/// Output of a projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    /// Projected vector; exact zeros are not stored.
    pub beta: SparseVector,
    /// Support chosen by the selector (may be larger than `beta`'s nonzeros).
    pub selected: Vec<usize>,
    /// Threshold (simplex) or shift (hyperplane) of the final convex projection.
    pub tau: f64,
    /// `||beta - w||^2`.
    pub distance_sq: f64,
    /// Set-function value of the selected support.
    pub objective: f64,
}

impl ProjectionResult {
    /// `support` sorted, `values` aligned to it.
    fn assemble(w: &[f64], support: Vec<usize>, values: Vec<f64>, tau: f64, objective: f64) -> Self {
        let mut in_support = vec![false; w.len()];
        for &i in &support {
            in_support[i] = true;
        }
        let on: f64 = support.iter().zip(&values).map(|(&i, &b)| (b - w[i]) * (b - w[i])).sum();
        let off: f64 = w
            .iter()
            .zip(&in_support)
            .filter(|(_, s)| !**s)
            .map(|(v, _)| v * v)
            .sum();
        let beta = SparseVector { dim: w.len(), support: support.clone(), values }.pruned();
        Self { beta, selected: support, tau, distance_sq: on + off, objective }
    }
}

/// Order used by the selectors: larger value first, then lower index.
#[inline]
fn desc_then_index(w: &[f64], a: usize, b: usize) -> Ordering {
    w[b].total_cmp(&w[a]).then(a.cmp(&b))
}

/// Indices of the `k` entries that come first under `order`, in that order.
fn select_first_k<F>(p: usize, k: usize, order: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> Ordering,
{
    let log2p = (usize::BITS - p.leading_zeros()) as usize;
    if k <= log2p {
        // partial selection: one pass, sorted buffer of size k
        let mut best: Vec<usize> = Vec::with_capacity(k + 1);
        for i in 0..p {
            if best.len() == k && order(i, best[k - 1]) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|&j| order(j, i) == Ordering::Less);
            best.insert(pos, i);
            best.truncate(k);
        }
        best
    } else if k < p / 4 {
        // streaming selection: keep at most 2k candidates that beat the
        // current k-th best, pruning back to k whenever the buffer fills
        let mut buf: Vec<usize> = Vec::with_capacity(2 * k);
        let mut cutoff: Option<usize> = None;
        for i in 0..p {
            if let Some(c) = cutoff {
                if order(i, c) != Ordering::Less {
                    continue;
                }
            }
            buf.push(i);
            if buf.len() == 2 * k {
                buf.select_nth_unstable_by(k - 1, |&a, &b| order(a, b));
                buf.truncate(k);
                cutoff = Some(buf[k - 1]);
            }
        }
        if buf.len() > k {
            buf.select_nth_unstable_by(k - 1, |&a, &b| order(a, b));
            buf.truncate(k);
        }
        buf.sort_unstable_by(|&a, &b| order(a, b));
        buf
    } else {
        let mut idx: Vec<usize> = (0..p).collect();
        if k < p {
            idx.select_nth_unstable_by(k - 1, |&a, &b| order(a, b));
            idx.truncate(k);
        }
        idx.sort_unstable_by(|&a, &b| order(a, b));
        idx
    }
}

fn check_sparsity(k: usize, p: usize) -> Result<()> {
    if k == 0 || k > p {
        Err(Error::SparsityOutOfRange { k, dim: p })
    } else {
        Ok(())
    }
}

/// Indices of the `k` largest entries by signed value, ascending.
pub fn top_k_indices(w: &[f64], k: usize) -> Result<Vec<usize>> {
    check_finite(w)?;
    check_sparsity(k, w.len())?;
    let mut idx = select_first_k(w.len(), k, |a, b| desc_then_index(w, a, b));
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps the `k` largest entries of `w` by signed value (not magnitude).
pub fn top_k_select(w: &[f64], k: usize) -> Result<SparseVector> {
    let support = top_k_indices(w, k)?;
    let values = support.iter().map(|&i| w[i]).collect();
    Ok(SparseVector { dim: w.len(), support, values })
}

/// Indices of the `k` largest entries by magnitude, ascending.
pub fn top_k_magnitude_indices(w: &[f64], k: usize) -> Result<Vec<usize>> {
    check_finite(w)?;
    check_sparsity(k, w.len())?;
    let mut idx = select_first_k(w.len(), k, |a, b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    idx.sort_unstable();
    Ok(idx)
}

/// Euclidean projection onto `{b >= 0, sum b = lambda}`. Returns `(beta, tau)`
/// with `beta_i = max(w_i - tau, 0)`.
pub fn project_simplex(w: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    check_finite(w)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLevel(lambda));
    }
    let tau = simplex_threshold(w, lambda);
    let beta = w.iter().map(|&v| (v - tau).max(0.0)).collect();
    Ok((beta, tau))
}

fn simplex_threshold(w: &[f64], lambda: f64) -> f64 {
    let mut sorted = w.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - lambda;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - lambda) / (j + 1) as f64;
        if u > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    tau
}

/// Euclidean projection onto `{sum b = lambda}`: a uniform shift by the mean excess.
pub fn project_hyperplane(w: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    check_finite(w)?;
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("level {lambda} is not finite")));
    }
    let tau = (compensated_sum(w.iter().copied()) - lambda) / w.len() as f64;
    Ok((w.iter().map(|v| v - tau).collect(), tau))
}

fn simplex_objective(w: &[f64], support: &[usize], beta: &[f64], tau: f64) -> f64 {
    support
        .iter()
        .zip(beta)
        .filter(|(_, b)| **b > 0.0)
        .map(|(&i, _)| w[i] * w[i] - tau * tau)
        .sum()
}

/// Sparse simplex projection: top-`k` signed selection followed by a simplex
/// projection of the selected entries.
pub fn gssp(w: &[f64], k: usize, lambda: f64) -> Result<ProjectionResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLevel(lambda));
    }
    let support = top_k_indices(w, k)?;
    let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
    let (values, tau) = project_simplex(&restricted, lambda)?;
    let objective = simplex_objective(w, &support, &values, tau);
    Ok(ProjectionResult::assemble(w, support, values, tau, objective))
}

/// Support chosen by the hyperplane greedy selector, in insertion order.
pub fn gshp_support(w: &[f64], k: usize, lambda: f64) -> Result<Vec<usize>> {
    check_finite(w)?;
    let p = w.len();
    check_sparsity(k, p)?;
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("level {lambda} is not finite")));
    }

    // The farthest remaining entry from any point is the largest or the
    // smallest remaining one, so k candidates from each end suffice.
    let high = select_first_k(p, k, |a, b| desc_then_index(w, a, b));
    let low = select_first_k(p, k, |a, b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));

    let seed = if lambda < 0.0 { low[0] } else { high[0] };
    let mut taken = vec![false; p];
    taken[seed] = true;
    let mut chosen = Vec::with_capacity(k);
    chosen.push(seed);
    let mut sum = w[seed];
    let (mut hi, mut lo) = (0usize, 0usize);

    while chosen.len() < k {
        while taken[high[hi]] {
            hi += 1;
        }
        while taken[low[lo]] {
            lo += 1;
        }
        let centre = (sum - lambda) / chosen.len() as f64;
        let (a, b) = (high[hi], low[lo]);
        let (da, db) = ((w[a] - centre).abs(), (w[b] - centre).abs());
        let next = match da.total_cmp(&db) {
            Ordering::Greater => a,
            Ordering::Less => b,
            Ordering::Equal => a.min(b),
        };
        taken[next] = true;
        chosen.push(next);
        sum += w[next];
    }
    Ok(chosen)
}

/// Sparse hyperplane projection.
pub fn gshp(w: &[f64], k: usize, lambda: f64) -> Result<ProjectionResult> {
    let mut support = gshp_support(w, k, lambda)?;
    support.sort_unstable();
    let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
    let (values, tau) = project_hyperplane(&restricted, lambda)?;
    let objective = hyperplane_set_value(&restricted, lambda);
    Ok(ProjectionResult::assemble(w, support, values, tau, objective))
}

fn check_support(w: &[f64], support: &[usize]) -> Result<()> {
    check_finite(w)?;
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut seen = vec![false; w.len()];
    for &i in support {
        if i >= w.len() {
            return Err(Error::IndexOutOfBounds { index: i, dim: w.len() });
        }
        if seen[i] {
            return Err(Error::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    Ok(())
}

/// `F+(S) = sum over supp(P(w|S)) of (w_i^2 - tau^2)`, where `tau` is the
/// simplex threshold of `w` restricted to `S`. Maximizing it over `k`-sets
/// minimizes the projection distance.
pub fn set_function_simplex(w: &[f64], support: &[usize], lambda: f64) -> Result<f64> {
    check_support(w, support)?;
    let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
    let (beta, tau) = project_simplex(&restricted, lambda)?;
    Ok(restricted
        .iter()
        .zip(&beta)
        .filter(|(_, b)| **b > 0.0)
        .map(|(v, _)| v * v - tau * tau)
        .sum())
}

/// `F(S) = sum_S w_i^2 - (sum_S w_i - lambda)^2 / |S|`.
pub fn set_function_hyperplane(w: &[f64], support: &[usize], lambda: f64) -> Result<f64> {
    check_support(w, support)?;
    let restricted: Vec<f64> = support.iter().map(|&i| w[i]).collect();
    let value = hyperplane_set_value(&restricted, lambda);
    debug_assert!({
        let rhs = telescoped_set_value(&restricted, lambda);
        (rhs - value).abs() <= 1e-8 * (1.0 + value.abs())
    });
    Ok(value)
}

fn hyperplane_set_value(restricted: &[f64], lambda: f64) -> f64 {
    let sq = compensated_sum(restricted.iter().map(|v| v * v));
    let excess = compensated_sum(restricted.iter().copied()) - lambda;
    sq - excess * excess / restricted.len() as f64
}

/// Telescoped form of the hyperplane set function:
/// `lambda (2 b_1 - lambda) + sum_{j >= 2} (j-1)/j (b_j - (sum_{i<j} b_i - lambda)/(j-1))^2`.
///
/// Equals `F` evaluated on all entries of `b` for any ordering of `b`.
pub fn telescoped_set_value(b: &[f64], lambda: f64) -> f64 {
    let Some(&first) = b.first() else { return 0.0 };
    let mut total = lambda * (2.0 * first - lambda);
    let mut prefix = first;
    for (j0, &bj) in b.iter().enumerate().skip(1) {
        let prev = j0 as f64;
        let centre = (prefix - lambda) / prev;
        total += prev / (prev + 1.0) * (bj - centre) * (bj - centre);
        prefix += bj;
    }
    total
}

/// `F(S + {i}) - F(S) = |S|/(|S|+1) * (w_i - (sum_S w - lambda)/|S|)^2`.
pub fn hyperplane_increment(w: &[f64], support: &[usize], index: usize, lambda: f64) -> Result<f64> {
    check_support(w, support)?;
    if index >= w.len() {
        return Err(Error::IndexOutOfBounds { index, dim: w.len() });
    }
    if support.contains(&index) {
        return Err(Error::DuplicateIndex(index));
    }
    let n = support.len() as f64;
    let centre = (compensated_sum(support.iter().map(|&j| w[j])) - lambda) / n;
    Ok(n / (n + 1.0) * (w[index] - centre) * (w[index] - centre))
}
