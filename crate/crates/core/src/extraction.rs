//! Solution extraction: turning a completed moment matrix into component
//! parameters and mixing weights.
//!
//! If `M = V P V^T` with `V = [v(theta_1), ..., v(theta_K)]`, then for any set
//! of rows `beta_1..beta_K` and any variable `p`,
//! `V[beta] diag(theta_{.,p}) = V[beta + e_p]`. With `U` an orthonormal basis of
//! the column space (`V = U Q`) this becomes a generalized eigenproblem that
//! shares the eigenvectors `Q` across all `p`. One random combination of the
//! shifted blocks yields `Q`; each coordinate then follows from a ratio of
//! random projections.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, RankPolicy};
use crate::polyring::{Monomial, MonomialBasis};

/// Largest condition number accepted for the leading row block.
pub const MAX_ROW_CONDITION: f64 = 1e8;
/// Imaginary parts up to this fraction of the spectral radius are dropped.
pub const IMAG_REL_TOL: f64 = 1e-6;
const EIGEN_RETRIES: usize = 8;
const RHO_RETRIES: usize = 8;

/// Orthonormal basis of the column space of a moment matrix.
#[derive(Clone, Debug)]
pub struct ColumnBasis {
    pub u: DMatrix<f64>,
    pub basis: MonomialBasis,
    pub k: usize,
}

/// Top-`k` left singular vectors of `m`, whose rows are labeled by `basis`.
pub fn column_space_basis(
    m: &DMatrix<f64>,
    basis: &MonomialBasis,
    k: usize,
    policy: RankPolicy,
) -> Result<ColumnBasis> {
    if m.nrows() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            got: m.nrows(),
        });
    }
    let rank = linalg::numeric_rank(m, policy);
    if rank < k {
        return Err(Error::RankTooSmall { rank, requested: k });
    }
    let svd = m.clone().svd(true, false);
    let u_full = svd.u.expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u = linalg::select_cols(&u_full, &order[..k]);
    Ok(ColumnBasis {
        u,
        basis: basis.clone(),
        k,
    })
}

/// Rows `beta_1..beta_K` of `U` together with their shifts by each variable.
#[derive(Clone, Debug)]
pub struct RowBasisSelection {
    pub betas: Vec<Monomial>,
    pub rows: Vec<usize>,
    /// `shift_rows[p][k]` is the row of `beta_k + e_p`.
    pub shift_rows: Vec<Vec<usize>>,
    pub condition: f64,
}

/// Picks the row block used by the eigenproblem.
///
/// Admissible rows are those whose shift by every variable is still in the
/// basis. The first `K` admissible rows are used when they are well
/// conditioned; otherwise rows are chosen by greedy column pivoting.
pub fn select_row_basis(cb: &ColumnBasis) -> Result<RowBasisSelection> {
    let vars: Vec<usize> = (0..cb.basis.num_vars()).collect();
    select_row_basis_for(cb, &vars)
}

/// Like [`select_row_basis`], but only shifts by the listed variables are
/// required; `shift_rows[i]` then belongs to `vars[i]`.
pub fn select_row_basis_for(cb: &ColumnBasis, vars: &[usize]) -> Result<RowBasisSelection> {
    let basis = &cb.basis;
    let p = basis.num_vars();
    if let Some(&v) = vars.iter().find(|&&v| v >= p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: v + 1,
        });
    }
    let shifts = |row: usize| -> Option<Vec<usize>> {
        vars.iter()
            .map(|&v| basis.position(&basis.get(row).mul(&Monomial::unit(p, v))))
            .collect()
    };
    let admissible: Vec<usize> = (0..basis.len()).filter(|&i| shifts(i).is_some()).collect();
    if admissible.len() < cb.k {
        return Err(Error::NoRowBasis(format!(
            "only {} rows have all shifts inside the basis, need {}",
            admissible.len(),
            cb.k
        )));
    }
    let build = |rows: Vec<usize>| -> RowBasisSelection {
        let block = linalg::select_rows(&cb.u, &rows);
        let per_row: Vec<Vec<usize>> = rows
            .iter()
            .map(|&r| shifts(r).expect("admissible"))
            .collect();
        let shift_rows = (0..vars.len())
            .map(|v| per_row.iter().map(|s| s[v]).collect())
            .collect();
        RowBasisSelection {
            betas: rows.iter().map(|&r| basis.get(r).clone()).collect(),
            condition: linalg::condition_number(&block),
            rows,
            shift_rows,
        }
    };
    let first = build(admissible[..cb.k].to_vec());
    if first.condition <= MAX_ROW_CONDITION {
        return Ok(first);
    }
    let pivoted = linalg::pivoted_rows(&cb.u, &admissible, cb.k)
        .map(build)
        .ok_or_else(|| Error::NoRowBasis("pivoted selection found no independent rows".into()))?;
    if pivoted.condition <= MAX_ROW_CONDITION {
        Ok(pivoted)
    } else {
        Err(Error::NoRowBasis(format!(
            "best row block has condition number {:.3e}",
            pivoted.condition
        )))
    }
}

/// Eigenvalues of a real square matrix, with small imaginary parts dropped.
pub fn real_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let ev: Vec<Complex<f64>> = a
        .clone()
        .schur()
        .complex_eigenvalues()
        .iter()
        .copied()
        .collect();
    let radius = ev.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let worst = ev.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if worst > IMAG_REL_TOL * radius.max(f64::MIN_POSITIVE) {
        return Err(Error::Extraction(format!(
            "complex eigenvalue with imaginary part {worst:.3e} (spectral radius {radius:.3e})"
        )));
    }
    let mut out: Vec<f64> = ev.iter().map(|z| z.re).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Unit null vector of `a - lambda I` (right singular vector of the smallest singular value).
fn eigenvector(a: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let n = a.nrows();
    let shifted = a - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    vt.row(imin).transpose()
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Eigen-decomposition of one random combination `U[beta]^{-1} sum_p eta_p U[beta + e_p]`.
struct SharedEigenvectors {
    q: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

fn shared_eigenvectors(
    u: &DMatrix<f64>,
    sel: &RowBasisSelection,
    rng: &mut ChaCha8Rng,
) -> Result<SharedEigenvectors> {
    let k = sel.rows.len();
    let p = sel.shift_rows.len();
    let base = linalg::select_rows(u, &sel.rows);
    let lu = base.clone().full_piv_lu();
    // Several random combinations are drawn; the one whose eigenvalues are
    // best separated (relative to their magnitude) is kept.
    let mut last_err = None;
    let mut best: Option<(f64, DMatrix<f64>, Vec<f64>)> = None;
    for _ in 0..EIGEN_RETRIES {
        let eta = normal_vector(rng, p);
        let mut combo = DMatrix::zeros(k, u.ncols());
        for (v, rows) in sel.shift_rows.iter().enumerate() {
            combo += linalg::select_rows(u, rows) * eta[v];
        }
        let t = lu.solve(&combo).ok_or(Error::SingularBlock {
            rank: linalg::numeric_rank(&base, RankPolicy::default()),
            needed: k,
        })?;
        let eigenvalues = match real_eigenvalues(&t) {
            Ok(ev) => ev,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let radius = eigenvalues.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let min_gap = eigenvalues
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let gap = if k > 1 {
            min_gap / radius.max(1.0)
        } else {
            f64::INFINITY
        };
        if k > 1 && gap <= 1e-8 {
            last_err = Some(Error::Extraction(format!(
                "coalesced eigenvalues (gap {min_gap:.3e})"
            )));
            continue;
        }
        if best.as_ref().is_none_or(|b| gap > b.0) {
            best = Some((gap, t, eigenvalues));
        }
        if k == 1 {
            break;
        }
    }
    if let Some((_, t, eigenvalues)) = best {
        let mut q = DMatrix::zeros(k, k);
        for (j, &lambda) in eigenvalues.iter().enumerate() {
            q.set_column(j, &eigenvector(&t, lambda));
        }
        return Ok(SharedEigenvectors { q, eigenvalues });
    }
    Err(last_err.unwrap_or_else(|| Error::Extraction("eigenproblem failed".into())))
}

/// Diagnostics of one extraction run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExtractionDiagnostics {
    pub row_condition: f64,
    /// Largest `|U[beta+e_p] q_k - theta_kp U[beta] q_k|`, relative to `|U[beta] q_k|`.
    pub eigen_residual: f64,
}

/// Recovers the `K` parameter vectors from the column basis.
///
/// Components come out ordered by the eigenvalues of the random combination,
/// so the order is a deterministic function of the seed.
pub fn extract_parameters(
    cb: &ColumnBasis,
    sel: &RowBasisSelection,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, ExtractionDiagnostics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = &cb.u;
    let k = sel.rows.len();
    let shared = shared_eigenvectors(u, sel, &mut rng)?;
    let base = linalg::select_rows(u, &sel.rows);
    let shifted: Vec<DMatrix<f64>> = sel
        .shift_rows
        .iter()
        .map(|rows| linalg::select_rows(u, rows))
        .collect();
    let base_q = &base * &shared.q;
    let shifted_q: Vec<DMatrix<f64>> = shifted.iter().map(|b| b * &shared.q).collect();

    let mut rho = None;
    for _ in 0..RHO_RETRIES {
        let candidate = normal_vector(&mut rng, k);
        let ok = (0..k).all(|j| {
            let col = base_q.column(j);
            candidate.dot(&col).abs() > 1e-6 * candidate.norm() * col.norm()
        });
        if ok {
            rho = Some(candidate);
            break;
        }
    }
    let rho = rho.ok_or_else(|| {
        Error::Extraction("projection vector kept hitting zero denominators".into())
    })?;

    let mut thetas = vec![vec![0.0; shifted.len()]; k];
    let mut eigen_residual: f64 = 0.0;
    for j in 0..k {
        let denom = rho.dot(&base_q.column(j));
        for (v, bq) in shifted_q.iter().enumerate() {
            let value = rho.dot(&bq.column(j)) / denom;
            thetas[j][v] = value;
            let res = (bq.column(j) - base_q.column(j) * value).norm() / base_q.column(j).norm();
            eigen_residual = eigen_residual.max(res);
        }
    }
    debug_assert_eq!(shared.eigenvalues.len(), k);
    Ok((
        thetas,
        ExtractionDiagnostics {
            row_condition: sel.condition,
            eigen_residual,
        },
    ))
}

/// Evaluations of every row monomial at each recovered atom.
///
/// Column `k` of the result is `U q_k` rescaled so the row of the zero
/// monomial equals 1; it holds `theta_k^beta` for every row label `beta`.
pub fn extract_monomial_vectors(
    cb: &ColumnBasis,
    sel: &RowBasisSelection,
    seed: u64,
) -> Result<(DMatrix<f64>, ExtractionDiagnostics)> {
    let one = cb
        .basis
        .position(&Monomial::zero(cb.basis.num_vars()))
        .ok_or_else(|| Error::Extraction("row labels lack the constant monomial".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = shared_eigenvectors(&cb.u, sel, &mut rng)?;
    let mut v = &cb.u * &shared.q;
    for j in 0..v.ncols() {
        let s = v[(one, j)];
        if s.abs() <= 1e-12 * v.column(j).norm() {
            return Err(Error::Extraction(
                "an atom has a vanishing constant row".into(),
            ));
        }
        v.column_mut(j).unscale_mut(s);
    }
    let base = linalg::select_rows(&v, &sel.rows);
    let mut eigen_residual: f64 = 0.0;
    for rows in &sel.shift_rows {
        let shifted = linalg::select_rows(&v, rows);
        for j in 0..v.ncols() {
            let (bc, sc) = (base.column(j), shifted.column(j));
            let lambda = bc.dot(&sc) / bc.norm_squared();
            eigen_residual = eigen_residual.max((sc - bc * lambda).norm() / bc.norm());
        }
    }
    Ok((
        v,
        ExtractionDiagnostics {
            row_condition: sel.condition,
            eigen_residual,
        },
    ))
}

/// Alternative extraction that reads each coordinate off eigenvalues of `P`
/// random combinations and inverts the mixing matrix (`theta = R^{-1} Lambda`).
/// Eigenvalues are paired through the eigenvectors of the first combination.
pub fn extract_parameters_by_inversion(
    cb: &ColumnBasis,
    sel: &RowBasisSelection,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = &cb.u;
    let k = sel.rows.len();
    let p = sel.shift_rows.len();
    let shared = shared_eigenvectors(u, sel, &mut rng)?;
    let base = linalg::select_rows(u, &sel.rows);
    let r = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    let q_inv = shared
        .q
        .clone()
        .try_inverse()
        .ok_or(Error::SingularBlock { rank: 0, needed: k })?;
    let mut lambda = DMatrix::zeros(p, k);
    for qrow in 0..p {
        let mut combo = DMatrix::zeros(k, u.ncols());
        for (v, rows) in sel.shift_rows.iter().enumerate() {
            combo += linalg::select_rows(u, rows) * r[(qrow, v)];
        }
        let t = linalg::solve(&base, &combo)?;
        let d = &q_inv * t * &shared.q;
        for j in 0..k {
            lambda[(qrow, j)] = d[(j, j)];
        }
    }
    let theta = linalg::solve(&r, &lambda)?;
    Ok((0..k)
        .map(|j| theta.column(j).iter().copied().collect())
        .collect())
}

/// Multiplication matrix `C = Phi Theta^{-1}` of one variable, from
/// `Theta = sum pi v v^T` and `Phi = sum pi x_j v v^T`.
pub fn multiplication_matrix(
    theta_hat: &DMatrix<f64>,
    phi_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = theta_hat.nrows();
    if theta_hat.ncols() != n || phi_hat.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: phi_hat.nrows(),
        });
    }
    if linalg::condition_number(theta_hat) > 1e12 {
        return Err(Error::SingularBlock {
            rank: linalg::numeric_rank(theta_hat, RankPolicy::with_rel_tol(1e-12)),
            needed: n,
        });
    }
    let ct = linalg::solve(&theta_hat.transpose(), &phi_hat.transpose())?;
    Ok(ct.transpose())
}

/// Least-squares mixing weights from observed moments `(alpha, y_alpha)`.
/// Returns the weights and the residual norm.
pub fn recover_weights(
    thetas: &[Vec<f64>],
    observed: &[(Monomial, f64)],
) -> Result<(Vec<f64>, f64)> {
    let k = thetas.len();
    if k == 1 {
        return Ok((vec![1.0], 0.0));
    }
    if observed.len() < k {
        return Err(Error::RankTooSmall {
            rank: observed.len(),
            requested: k,
        });
    }
    let design = DMatrix::from_fn(observed.len(), k, |i, j| observed[i].0.eval(&thetas[j]));
    let rhs = DVector::from_iterator(observed.len(), observed.iter().map(|(_, v)| *v));
    let rank = linalg::numeric_rank(&design, RankPolicy::with_rel_tol(1e-10));
    if rank < k {
        return Err(Error::RankTooSmall { rank, requested: k });
    }
    let w = linalg::lstsq(&design, &rhs, 1e-12);
    let residual = (&design * &w - &rhs).norm();
    Ok((w.iter().copied().collect(), residual))
}
