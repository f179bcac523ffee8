//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Threshold rule for deciding which singular values count as nonzero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankPolicy {
    /// Singular values at or below `rel_tol * sigma_max` are treated as zero.
    pub rel_tol: f64,
    /// Absolute floor applied in addition to the relative threshold.
    pub abs_floor: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_floor: 0.0,
        }
    }
}

impl RankPolicy {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn threshold(&self, sigma_max: f64) -> f64 {
        (self.rel_tol * sigma_max).max(self.abs_floor)
    }
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Number of singular values above the policy threshold.
pub fn numeric_rank(a: &DMatrix<f64>, policy: RankPolicy) -> usize {
    let s = singular_values(a);
    let Some(&smax) = s.first() else {
        return 0;
    };
    if smax == 0.0 {
        return 0;
    }
    let tau = policy.threshold(smax);
    s.iter().filter(|&&v| v > tau).count()
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sorted_sym_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Projection onto the positive semidefinite cone in the Frobenius norm.
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += lambda * v * v.transpose();
        }
    }
    out
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Minimum-norm least-squares solution via SVD with relative cutoff.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (rel_tol * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).expect("u and v were computed")
}

/// Orthonormal basis for the null space of `a` (columns), using a relative cutoff.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so the thin SVD exposes every right singular vector.
    let padded = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let tau = rel_tol * smax;
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tau || smax == 0.0)
        .collect();
    let mut out = DMatrix::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.set_column(j, &vt.row(i).transpose());
    }
    out
}

/// Greedy column-pivoted selection of `k` rows of `a` that are as independent
/// as possible, restricted to `admissible` row indices. Returns the chosen rows
/// in the order they were picked.
pub fn pivoted_rows(a: &DMatrix<f64>, admissible: &[usize], k: usize) -> Option<Vec<usize>> {
    if admissible.len() < k {
        return None;
    }
    let mut residual: Vec<DVector<f64>> = admissible
        .iter()
        .map(|&i| a.row(i).transpose().into_owned())
        .collect();
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; admissible.len()];
    for _ in 0..k {
        let (best, norm) = residual
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, r)| (i, r.norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if norm == 0.0 {
            return None;
        }
        used[best] = true;
        chosen.push(admissible[best]);
        let q = &residual[best] / norm;
        for (i, r) in residual.iter_mut().enumerate() {
            if !used[i] {
                let proj = q.dot(r);
                *r -= &q * proj;
            }
        }
    }
    Some(chosen)
}

/// 2-norm condition number; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

pub fn select_cols(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

/// Solves `a x = b` with a full-pivot LU factorization.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = a.clone().full_piv_lu();
    lu.solve(b).ok_or(Error::SingularBlock {
        rank: numeric_rank(a, RankPolicy::default()),
        needed: a.nrows(),
    })
}
