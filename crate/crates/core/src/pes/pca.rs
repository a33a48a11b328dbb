//! Principal component analysis on descriptor matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::PesError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `dim`.
    pub components: Vec<Vec<f64>>,
    /// Population variance along each component, descending.
    pub explained_variance: Vec<f64>,
    pub n_samples: u64,
    /// Fewer than the requested number of non-zero variance directions.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `(d - mean) · componentsᵀ`.
    pub fn project(&self, d: &[f64]) -> Result<Vec<f64>, PesError> {
        if d.len() != self.dim() {
            return Err(PesError::DimensionMismatch { expected: self.dim(), found: d.len() });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(d).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    /// `mean + scores · components`.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (s, c) in scores.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += s * v;
            }
        }
        out
    }
}

/// Two-pass streaming accumulator: feed every row to [`MeanPass`], then
/// every row again to the resulting [`ScatterPass`]. Memory is `O(dim²)`
/// regardless of the number of rows.
#[derive(Clone, Debug)]
pub struct MeanPass {
    sum: Vec<f64>,
    n: u64,
}

impl MeanPass {
    pub fn new(dim: usize) -> Self {
        MeanPass { sum: vec![0.0; dim], n: 0 }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<(), PesError> {
        if row.len() != self.sum.len() {
            return Err(PesError::DimensionMismatch { expected: self.sum.len(), found: row.len() });
        }
        self.sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        self.n += 1;
        Ok(())
    }

    pub fn finish(self) -> ScatterPass {
        let n = self.n.max(1) as f64;
        let dim = self.sum.len();
        ScatterPass {
            mean: self.sum.into_iter().map(|s| s / n).collect(),
            scatter: DMatrix::zeros(dim, dim),
            n: 0,
            expected: self.n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScatterPass {
    mean: Vec<f64>,
    scatter: DMatrix<f64>,
    n: u64,
    expected: u64,
}

impl ScatterPass {
    pub fn push(&mut self, row: &[f64]) -> Result<(), PesError> {
        if row.len() != self.mean.len() {
            return Err(PesError::DimensionMismatch { expected: self.mean.len(), found: row.len() });
        }
        let centered = DVector::from_iterator(row.len(), row.iter().zip(&self.mean).map(|(x, m)| x - m));
        self.scatter.syger(1.0, &centered, &centered, 1.0);
        self.n += 1;
        Ok(())
    }

    pub fn fit(self, k: usize) -> Result<PcaModel, PesError> {
        if self.n != self.expected {
            return Err(PesError::InvalidParams(format!(
                "second pass saw {} rows, first pass {}",
                self.n, self.expected
            )));
        }
        if k == 0 || (self.n as usize) < k {
            return Err(PesError::InvalidParams(format!("need rows >= k >= 1 (rows {}, k {k})", self.n)));
        }
        let mut cov = self.scatter / self.n as f64;
        // syger fills the lower triangle only.
        cov.fill_upper_triangle_with_lower_triangle();
        let eig = SymmetricEigen::new(cov);
        let pairs = (0..eig.eigenvalues.len())
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect();
        Ok(assemble(self.mean, pairs, k, self.n))
    }
}

/// Relative threshold below which an eigenvalue counts as zero.
const RANK_TOL: f64 = 1e-12;

fn assemble(mean: Vec<f64>, mut pairs: Vec<(f64, Vec<f64>)>, k: usize, n: u64) -> PcaModel {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0.max(0.0));
    let tol = RANK_TOL * top.max(f64::MIN_POSITIVE);
    let usable = pairs.iter().take_while(|p| p.0 > tol).count();
    let kept = k.min(usable);
    let mut components = Vec::with_capacity(kept);
    let mut explained_variance = Vec::with_capacity(kept);
    for (lambda, mut v) in pairs.into_iter().take(kept) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        apply_sign_convention(&mut v);
        components.push(v);
        explained_variance.push(lambda);
    }
    PcaModel {
        mean,
        components,
        explained_variance,
        n_samples: n,
        rank_deficient: kept < k,
    }
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is positive.
pub fn apply_sign_convention(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// In-memory fit. When there are fewer rows than dimensions the `N × N`
/// Gram matrix is diagonalized instead of the `D × D` covariance; both give
/// the same components.
pub fn fit_pca(rows: &[Vec<f64>], k: usize) -> Result<PcaModel, PesError> {
    let n = rows.len();
    if k == 0 || n < k {
        return Err(PesError::InvalidParams(format!("need rows >= k >= 1 (rows {n}, k {k})")));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(PesError::DimensionMismatch { expected: dim, found: bad.len() });
    }
    if n >= dim {
        let mut first = MeanPass::new(dim);
        for r in rows {
            first.push(r)?;
        }
        let mut second = first.finish();
        for r in rows {
            second.push(r)?;
        }
        return second.fit(k);
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let gram = (&xc * xc.transpose()) / n as f64;
    let eig = SymmetricEigen::new(gram);
    let pairs = (0..n)
        .map(|i| {
            let lambda = eig.eigenvalues[i];
            // u = Xcᵀ v, normalized later.
            let u = xc.transpose() * eig.eigenvectors.column(i);
            (lambda, u.iter().copied().collect())
        })
        .collect();
    Ok(assemble(mean, pairs, k, n as u64))
}
