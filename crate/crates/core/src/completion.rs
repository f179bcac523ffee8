//! Moment completion.
//!
//! Three routes fill in the unknown parameter moments `y`:
//!
//! * a direct linear solve, when the moment conditions pin every unknown;
//! * low-rank corner completion `X = C A^{-1} B`, used for multiview models and
//!   for flat extensions of a determined lower-degree block;
//! * a trace-minimizing semidefinite program over `M_r(y) >= 0`, solved with
//!   an alternating-direction splitting between the affine constraint set and
//!   the PSD cone.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, RankPolicy};
use crate::momentmat::{
    assemble, build_moment_index, flat_extension_rank, flat_extension_rank_with_slack,
    LinearMomentConstraint, LocalizingIndex, MomentIndex, MomentSequence,
};
use crate::polyring::{monomials_up_to, Monomial};

/// Linear moment conditions over a fixed set of unknown exponents.
#[derive(Clone, Debug)]
pub struct MomentConstraintSystem {
    num_vars: usize,
    degree: u32,
    unknowns: Vec<Monomial>,
    positions: HashMap<Monomial, usize>,
    constraints: Vec<LinearMomentConstraint>,
    /// Per-constraint weight when the row may be violated at a quadratic cost.
    soft: Vec<Option<f64>>,
}

impl MomentConstraintSystem {
    /// System over every exponent with `|alpha| <= 2r`, seeded with `y_0 = 1`.
    pub fn new(num_vars: usize, degree: u32) -> Self {
        let unknowns = monomials_up_to(num_vars, 2 * degree).monomials().to_vec();
        Self::with_unknowns(num_vars, degree, unknowns)
    }

    /// System over an explicit unknown set (which must contain the zero exponent).
    pub fn with_unknowns(num_vars: usize, degree: u32, mut unknowns: Vec<Monomial>) -> Self {
        unknowns.sort();
        unknowns.dedup();
        let positions = unknowns
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let mut sys = Self {
            num_vars,
            degree,
            unknowns,
            positions,
            constraints: Vec::new(),
            soft: Vec::new(),
        };
        let zero = Monomial::zero(num_vars);
        let norm = LinearMomentConstraint::new(BTreeMap::from([(zero, 1.0)]), 1.0)
            .expect("nonzero coefficient");
        sys.add(norm).expect("zero exponent is an unknown");
        sys
    }

    pub fn add(&mut self, c: LinearMomentConstraint) -> Result<()> {
        if let Some(m) = c
            .coefficients()
            .keys()
            .find(|m| !self.positions.contains_key(*m))
        {
            return Err(Error::UnknownExponent(m.clone()));
        }
        self.constraints.push(c);
        self.soft.push(None);
        Ok(())
    }

    /// Adds a row that the SDP reweighting rounds may violate at cost
    /// `(weight * residual)^2 / 2`. Other routes treat it like [`Self::add`].
    pub fn add_soft(&mut self, c: LinearMomentConstraint, weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "soft constraint weight {weight} must be positive"
            )));
        }
        self.add(c)?;
        *self.soft.last_mut().expect("row just added") = Some(weight);
        Ok(())
    }

    pub fn has_soft(&self) -> bool {
        self.soft.iter().any(Option::is_some)
    }

    pub fn extend(&mut self, cs: impl IntoIterator<Item = LinearMomentConstraint>) -> Result<()> {
        cs.into_iter().try_for_each(|c| self.add(c))
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn unknowns(&self) -> &[Monomial] {
        &self.unknowns
    }

    pub fn constraints(&self) -> &[LinearMomentConstraint] {
        &self.constraints
    }

    /// Same constraints, restricted to a smaller unknown set. Fails if a
    /// constraint touches an exponent outside the new set.
    pub fn restricted(&self, unknowns: Vec<Monomial>) -> Result<Self> {
        let mut out = Self::with_unknowns(self.num_vars, self.degree, unknowns);
        out.constraints.clear();
        out.soft.clear();
        for (c, w) in self.constraints.iter().zip(&self.soft) {
            out.add(c.clone())?;
            *out.soft.last_mut().expect("row just added") = *w;
        }
        Ok(out)
    }

    /// Stacked `(E, b)` with one row per constraint.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut e = DMatrix::zeros(self.constraints.len(), self.unknowns.len());
        let mut b = DVector::zeros(self.constraints.len());
        for (row, c) in self.constraints.iter().enumerate() {
            for (m, v) in c.coefficients() {
                e[(row, self.positions[m])] += v;
            }
            b[row] = c.rhs();
        }
        (e, b)
    }

    /// `(E, b)` split into hard rows and soft rows with their weights.
    fn dense_split(
        &self,
    ) -> (
        (DMatrix<f64>, DVector<f64>),
        (DMatrix<f64>, DVector<f64>, DVector<f64>),
    ) {
        let (e, b) = self.dense();
        let hard: Vec<usize> = (0..self.soft.len())
            .filter(|&i| self.soft[i].is_none())
            .collect();
        let soft: Vec<usize> = (0..self.soft.len())
            .filter(|&i| self.soft[i].is_some())
            .collect();
        let w = DVector::from_iterator(
            soft.len(),
            soft.iter().map(|&i| self.soft[i].unwrap_or(0.0)),
        );
        (
            (e.select_rows(&hard), b.select_rows(&hard)),
            (e.select_rows(&soft), b.select_rows(&soft), w),
        )
    }

    pub fn sequence_from(&self, values: &DVector<f64>) -> MomentSequence {
        let map = self
            .unknowns
            .iter()
            .cloned()
            .zip(values.iter().copied())
            .collect();
        MomentSequence::new(self.num_vars, map).expect("unknowns share the ring")
    }

    /// Euclidean norm of all constraint residuals at `y`.
    pub fn residual_norm(&self, y: &MomentSequence) -> Result<f64> {
        let mut acc = 0.0;
        for c in &self.constraints {
            acc += c.residual(y)?.powi(2);
        }
        Ok(acc.sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletionStatus {
    ExactLinear,
    /// Filled by low-rank corner completion.
    Corner,
    SdpConverged,
    SdpMaxIter,
}

#[derive(Clone, Debug)]
pub struct CompletionResult {
    pub y: MomentSequence,
    pub status: CompletionStatus,
    pub residual_norm: f64,
    pub certificate: Option<usize>,
    pub iterations: usize,
    /// SDP solves performed (reweighting rounds included).
    pub rounds: usize,
}

/// Tolerances for the linear route.
#[derive(Clone, Copy, Debug)]
pub struct LinearConfig {
    /// Relative singular-value cutoff for deciding full column rank.
    pub rank_rel_tol: f64,
    /// Largest acceptable least-squares residual, relative to `1 + |b|`.
    pub residual_tol: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            rank_rel_tol: 1e-10,
            residual_tol: 1e-8,
        }
    }
}

/// Solves the stacked moment conditions when they determine every unknown.
pub fn solve_linear_completion(
    sys: &MomentConstraintSystem,
    cfg: LinearConfig,
) -> Result<CompletionResult> {
    let (e, b) = sys.dense();
    let n = sys.unknowns().len();
    let rank = linalg::numeric_rank(&e, RankPolicy::with_rel_tol(cfg.rank_rel_tol));
    if rank < n {
        return Err(Error::Underdetermined { rank, unknowns: n });
    }
    let sol = if sys.has_soft() {
        weighted_solution(sys, cfg.rank_rel_tol)
    } else {
        equilibrated_lstsq(&e, &b, cfg.rank_rel_tol)
    };
    let residual = (&e * &sol - &b).norm();
    if residual > cfg.residual_tol * (1.0 + b.norm()) {
        return Err(Error::Inconsistent { residual });
    }
    let y = sys.sequence_from(&sol);
    let certificate = if sys.degree() >= 1 && covers_degree(&y, 2 * sys.degree()) {
        flat_extension_rank(&y, sys.degree(), RankPolicy::default())?
    } else {
        None
    };
    Ok(CompletionResult {
        y,
        status: CompletionStatus::ExactLinear,
        residual_norm: residual,
        certificate,
        iterations: 0,
        rounds: 0,
    })
}

/// Least squares after scaling each row to unit norm, so a single badly
/// scaled condition does not dominate.
fn equilibrated_lstsq(e: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let mut es = e.clone();
    let mut bs = b.clone();
    for i in 0..es.nrows() {
        let norm = es.row(i).norm();
        if norm > 0.0 {
            es.row_mut(i).scale_mut(1.0 / norm);
            bs[i] /= norm;
        }
    }
    linalg::lstsq(&es, &bs, rel_tol)
}

/// Hard rows held exactly, soft rows fitted by least squares with their weights.
fn weighted_solution(sys: &MomentConstraintSystem, rel_tol: f64) -> DVector<f64> {
    let ((eh, bh), (f, g, w)) = sys.dense_split();
    let n = sys.unknowns().len();
    let (base, null) = if eh.nrows() == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        (
            equilibrated_lstsq(&eh, &bh, rel_tol),
            linalg::null_space(&eh, rel_tol),
        )
    };
    if null.ncols() == 0 {
        return base;
    }
    let mut a = &f * &null;
    let mut rhs = &g - &f * &base;
    for i in 0..a.nrows() {
        a.row_mut(i).scale_mut(w[i]);
        rhs[i] *= w[i];
    }
    base + null * linalg::lstsq(&a, &rhs, rel_tol)
}

fn covers_degree(y: &MomentSequence, degree: u32) -> bool {
    monomials_up_to(y.num_vars(), degree)
        .iter()
        .all(|m| y.contains(m))
}

/// Fills the missing corner of `[[A, B], [C, X]]` as `X = C A^{-1} B`.
pub fn complete_corner(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if a.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: a.ncols(),
        });
    }
    if b.nrows() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: b.nrows(),
        });
    }
    if c.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: c.ncols(),
        });
    }
    let rank = linalg::numeric_rank(a, RankPolicy::with_rel_tol(1e-10));
    if rank < k {
        return Err(Error::SingularBlock { rank, needed: k });
    }
    Ok(c * linalg::solve(a, b)?)
}

/// Extends moments known up to degree `2r - 1` to degree `2r` so that `M_r`
/// has the same rank-`k` column space as the block `M_{r-1}` (a flat extension).
pub fn flat_extend(y: &MomentSequence, r: u32, k: usize) -> Result<MomentSequence> {
    assert!(r >= 1);
    let p = y.num_vars();
    let basis = monomials_up_to(p, r);
    let lower = monomials_up_to(p, r - 1).len();
    let lower_index = build_moment_index(p, r - 1);
    let m_lower = crate::momentmat::assemble(&lower_index, y)?;
    let pivots = linalg::pivoted_rows(&m_lower, &(0..lower).collect::<Vec<_>>(), k).ok_or(
        Error::SingularBlock {
            rank: linalg::numeric_rank(&m_lower, RankPolicy::default()),
            needed: k,
        },
    )?;
    let top: Vec<usize> = (lower..basis.len()).collect();
    let cell = |i: usize, j: usize| y.get(&basis.get(i).mul(basis.get(j)));
    let mut a = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(k, top.len());
    for (ii, &i) in pivots.iter().enumerate() {
        for (jj, &j) in pivots.iter().enumerate() {
            a[(ii, jj)] = cell(i, j)?;
        }
        for (jj, &j) in top.iter().enumerate() {
            b[(ii, jj)] = cell(i, j)?;
        }
    }
    let x = complete_corner(&a, &b, &b.transpose())?;
    let mut sums: BTreeMap<Monomial, (f64, usize)> = BTreeMap::new();
    for (ii, &i) in top.iter().enumerate() {
        for (jj, &j) in top.iter().enumerate() {
            let e = basis.get(i).mul(basis.get(j));
            if e.degree() == 2 * r {
                let s = sums.entry(e).or_insert((0.0, 0));
                s.0 += x[(ii, jj)];
                s.1 += 1;
            }
        }
    }
    let mut out = y.clone();
    for (e, (s, n)) in sums {
        out.insert(e, s / n as f64);
    }
    Ok(out)
}

/// Completes a three-or-more-view moment sequence.
///
/// `views[l]` is the number of coordinates of view `l`; variables are laid out
/// view after view. `observed` must hold every exponent that uses at most one
/// coordinate per view (the cross-view moments). All remaining exponents up to
/// `max_degree` are filled by repeated corner completion. For each missing
/// exponent `alpha`, splits `alpha = mu + nu` are tried in grlex order of `mu`
/// and pivot blocks `E[xi^(a) xi^(b)^T]` are tried in the order
/// (1,2), (1,3), (2,3), ..., then same-view blocks once they are filled.
pub fn complete_multiview(
    observed: &MomentSequence,
    views: &[usize],
    k: usize,
    max_degree: u32,
) -> Result<MomentSequence> {
    let p: usize = views.iter().sum();
    if observed.num_vars() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: observed.num_vars(),
        });
    }
    let offsets: Vec<usize> = views
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let var = |view: usize, i: usize| Monomial::unit(p, offsets[view] + i);

    let mut y = observed.clone();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            pairs.push((a, b));
        }
    }
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            pairs.push((b, a));
        }
    }
    for a in 0..views.len() {
        pairs.push((a, a));
    }

    // Pivot rows/cols for each (a, b), chosen once the block is known.
    let mut pivots: HashMap<(usize, usize), (Vec<usize>, Vec<usize>, DMatrix<f64>)> =
        HashMap::new();
    let mut try_pivot = |y: &MomentSequence,
                         a: usize,
                         b: usize|
     -> Option<(Vec<usize>, Vec<usize>, DMatrix<f64>)> {
        if let Some(pv) = pivots.get(&(a, b)) {
            return Some(pv.clone());
        }
        let mut block = DMatrix::zeros(views[a], views[b]);
        for i in 0..views[a] {
            for j in 0..views[b] {
                block[(i, j)] = y.get(&var(a, i).mul(&var(b, j))).ok()?;
            }
        }
        if views[a] < k || views[b] < k {
            return None;
        }
        let rows = linalg::pivoted_rows(&block, &(0..views[a]).collect::<Vec<_>>(), k)?;
        let sub = linalg::select_rows(&block, &rows);
        let cols = linalg::pivoted_rows(&sub.transpose(), &(0..views[b]).collect::<Vec<_>>(), k)?;
        let a_mat = linalg::select_cols(&sub, &cols);
        if linalg::numeric_rank(&a_mat, RankPolicy::with_rel_tol(1e-10)) < k {
            return None;
        }
        let pv = (rows, cols, a_mat);
        pivots.insert((a, b), pv.clone());
        Some(pv)
    };

    let targets: Vec<Monomial> = monomials_up_to(p, max_degree)
        .iter()
        .filter(|m| !y.contains(m))
        .cloned()
        .collect();
    let mut missing: Vec<Monomial> = targets;
    while !missing.is_empty() {
        let before = missing.len();
        let mut still = Vec::new();
        for alpha in missing {
            match fill_one(&y, &alpha, &pairs, &var, &mut try_pivot)? {
                Some(v) => y.insert(alpha, v),
                None => still.push(alpha),
            }
        }
        if still.len() == before {
            return Err(Error::SingularBlock { rank: 0, needed: k });
        }
        missing = still;
    }
    Ok(y)
}

type PivotFn<'a> =
    dyn FnMut(&MomentSequence, usize, usize) -> Option<(Vec<usize>, Vec<usize>, DMatrix<f64>)> + 'a;

fn fill_one(
    y: &MomentSequence,
    alpha: &Monomial,
    pairs: &[(usize, usize)],
    var: &dyn Fn(usize, usize) -> Monomial,
    try_pivot: &mut PivotFn<'_>,
) -> Result<Option<f64>> {
    let p = alpha.num_vars();
    let divisors: Vec<Monomial> = monomials_up_to(p, alpha.degree())
        .iter()
        .filter(|m| m.divides(alpha))
        .cloned()
        .collect();
    for mu in &divisors {
        let nu = alpha.checked_div(mu).expect("mu divides alpha");
        for &(a, b) in pairs {
            let Some((rows, cols, a_mat)) = try_pivot(y, a, b) else {
                continue;
            };
            let c_row: Option<Vec<f64>> = cols
                .iter()
                .map(|&j| y.get(&mu.mul(&var(b, j))).ok())
                .collect();
            let b_col: Option<Vec<f64>> = rows
                .iter()
                .map(|&i| y.get(&var(a, i).mul(&nu)).ok())
                .collect();
            if let (Some(c_row), Some(b_col)) = (c_row, b_col) {
                let c_mat = DMatrix::from_row_slice(1, c_row.len(), &c_row);
                let b_mat = DMatrix::from_column_slice(b_col.len(), 1, &b_col);
                let x = complete_corner(&a_mat, &b_mat, &c_mat)?;
                return Ok(Some(x[(0, 0)]));
            }
        }
    }
    Ok(None)
}

/// Settings for the trace-minimizing SDP.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdpConfig {
    /// Initial penalty parameter of the splitting.
    pub rho: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Relative singular-value cutoff used for rank decisions.
    pub rank_rel_tol: f64,
    /// Over-relaxation factor in `(0, 2)`.
    pub over_relaxation: f64,
    /// Residual balancing of `rho` during the run.
    pub adaptive_rho: bool,
    /// Reweighting rounds used by [`solve_sdp_rank`] after the first solve.
    pub rank_rounds: usize,
    /// Multiplier of the quadratic penalty on soft rows during reweighting rounds.
    pub misfit_weight: f64,
    /// Scaling matrix `C` of the objective `tr(C M_r(y))`; identity when absent.
    #[serde(skip)]
    pub scaling: Option<DMatrix<f64>>,
}

impl Default for SdpConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            max_iter: 20_000,
            rank_rel_tol: 1e-6,
            over_relaxation: 1.6,
            adaptive_rho: true,
            rank_rounds: 30,
            misfit_weight: 1.0,
            scaling: None,
        }
    }
}

impl SdpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidSpec(format!("sdp config: {what}")));
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.rank_rel_tol > 0.0) {
            return bad("rank_rel_tol must be positive");
        }
        if !(self.misfit_weight > 0.0 && self.misfit_weight.is_finite()) {
            return bad("misfit_weight must be positive");
        }
        if !(self.over_relaxation > 0.0 && self.over_relaxation < 2.0) {
            return bad("over_relaxation must lie in (0, 2)");
        }
        Ok(())
    }

    pub fn rank_policy(&self) -> RankPolicy {
        RankPolicy::with_rel_tol(self.rank_rel_tol)
    }
}

/// A PSD block `Phi(y) = sum_v y_v G_v` stored as sparse entries of the upper triangle.
struct PsdBlock {
    size: usize,
    entries: Vec<(usize, usize, usize, f64)>,
}

impl PsdBlock {
    fn apply(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for &(i, j, v, c) in &self.entries {
            m[(i, j)] += c * y[v];
            if i != j {
                m[(j, i)] += c * y[v];
            }
        }
        m
    }

    /// Adjoint under the Frobenius inner product.
    fn adjoint(&self, w: &DMatrix<f64>, out: &mut DVector<f64>) {
        for &(i, j, v, c) in &self.entries {
            out[v] += if i == j {
                c * w[(i, j)]
            } else {
                c * (w[(i, j)] + w[(j, i)])
            };
        }
    }

    fn gram(&self, h: &mut DMatrix<f64>) {
        // Entries sharing a cell couple their variables.
        let mut by_cell: HashMap<(usize, usize), Vec<(usize, f64)>> = HashMap::new();
        for &(i, j, v, c) in &self.entries {
            by_cell.entry((i, j)).or_default().push((v, c));
        }
        for ((i, j), terms) in by_cell {
            let mult = if i == j { 1.0 } else { 2.0 };
            for &(v1, c1) in &terms {
                for &(v2, c2) in &terms {
                    h[(v1, v2)] += mult * c1 * c2;
                }
            }
        }
    }
}

fn moment_block(index: &MomentIndex, pos: &HashMap<Monomial, usize>) -> Result<PsdBlock> {
    let n = index.size();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i..n {
            let m = index.cell(i, j);
            let v = *pos
                .get(m)
                .ok_or_else(|| Error::UnknownExponent(m.clone()))?;
            entries.push((i, j, v, 1.0));
        }
    }
    Ok(PsdBlock { size: n, entries })
}

fn localizing_block(index: &LocalizingIndex, pos: &HashMap<Monomial, usize>) -> Result<PsdBlock> {
    let n = index.size();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i..n {
            for (m, c) in index.cell(i, j) {
                let v = *pos
                    .get(m)
                    .ok_or_else(|| Error::UnknownExponent(m.clone()))?;
                entries.push((i, j, v, *c));
            }
        }
    }
    Ok(PsdBlock { size: n, entries })
}

/// Minimizes `tr(C M_r(y))` subject to the linear moment conditions,
/// `M_r(y) >= 0` and every localizing matrix in `extra_psd` being PSD.
pub fn solve_sdp_nuclear(
    sys: &MomentConstraintSystem,
    cfg: &SdpConfig,
    extra_psd: &[LocalizingIndex],
) -> Result<CompletionResult> {
    solve_sdp(sys, cfg, extra_psd, false)
}

fn solve_sdp(
    sys: &MomentConstraintSystem,
    cfg: &SdpConfig,
    extra_psd: &[LocalizingIndex],
    use_soft: bool,
) -> Result<CompletionResult> {
    cfg.validate()?;
    let pos: HashMap<Monomial, usize> = sys
        .unknowns()
        .iter()
        .enumerate()
        .map(|(i, m)| (m.clone(), i))
        .collect();
    let m_index = build_moment_index(sys.num_vars(), sys.degree());
    let mut blocks = vec![moment_block(&m_index, &pos)?];
    for li in extra_psd {
        blocks.push(localizing_block(li, &pos)?);
    }
    let nv = sys.unknowns().len();

    // Objective coefficients c_v = <C, G_v> on the moment block.
    let scaling = match &cfg.scaling {
        Some(c) if c.nrows() != m_index.size() || c.ncols() != m_index.size() => {
            return Err(Error::DimensionMismatch {
                expected: m_index.size(),
                got: c.nrows(),
            })
        }
        Some(c) => linalg::symmetrize(c),
        None => DMatrix::identity(m_index.size(), m_index.size()),
    };
    let mut cost = DVector::zeros(nv);
    blocks[0].adjoint(&scaling, &mut cost);

    // Affine set {y : E y = b} in least-squares sense: y = y_p + N z. Soft
    // rows leave the affine set and enter the objective as lambda/2 |W(F y - g)|^2.
    let ((e, b), (f, g, w)) = if use_soft {
        sys.dense_split()
    } else {
        let (e, b) = sys.dense();
        (
            (e, b),
            (DMatrix::zeros(0, nv), DVector::zeros(0), DVector::zeros(0)),
        )
    };
    let y_p = linalg::lstsq(&e, &b, 1e-12);
    let null = linalg::null_space(&e, 1e-12);
    let mut h = DMatrix::zeros(nv, nv);
    for blk in &blocks {
        blk.gram(&mut h);
    }
    let reduced = null.transpose() * &h * &null;
    let wf = DMatrix::from_diagonal(&w) * &f * &null;
    let soft_gram = wf.transpose() * &wf;
    let soft_lin = wf.transpose() * (DMatrix::from_diagonal(&w) * (&f * &y_p - &g));
    let factor = |rho: f64| -> Result<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>> {
        if null.ncols() == 0 {
            return Ok(None);
        }
        (&reduced + &soft_gram * (cfg.misfit_weight / rho))
            .cholesky()
            .map(Some)
            .ok_or_else(|| Error::NoConvergence("reduced normal matrix is singular".into()))
    };
    let nt_cost = null.transpose() * &cost;
    let h_yp = &h * &y_p;

    let mut rho = cfg.rho;
    let mut chol = factor(rho)?;
    let alpha = cfg.over_relaxation;
    let mut y = y_p.clone();
    let mut xs: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|blk| linalg::project_psd(&blk.apply(&y)))
        .collect();
    let mut us: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|blk| DMatrix::zeros(blk.size, blk.size))
        .collect();

    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        // y-update: minimize c.y + rho/2 sum |Phi(y) - X + U|^2 over the affine set.
        if let Some(chol) = &chol {
            let mut rhs_full = DVector::zeros(nv);
            for (blk, (x, u)) in blocks.iter().zip(xs.iter().zip(&us)) {
                blk.adjoint(&(x - u), &mut rhs_full);
            }
            let rhs = null.transpose() * (rhs_full - &h_yp)
                - (&nt_cost + &soft_lin * cfg.misfit_weight) / rho;
            let z = chol.solve(&rhs);
            y = &y_p + &null * z;
        }

        let mut r_norm2 = 0.0;
        let mut phi_norm2 = 0.0;
        let mut x_norm2 = 0.0;
        let mut dual_vec = DVector::zeros(nv);
        let mut u_adj = DVector::zeros(nv);
        for (bi, blk) in blocks.iter().enumerate() {
            let phi = blk.apply(&y);
            let relaxed = &phi * alpha + &xs[bi] * (1.0 - alpha);
            let x_new = linalg::project_psd(&(&relaxed + &us[bi]));
            us[bi] += &relaxed - &x_new;
            r_norm2 += (&phi - &x_new).norm_squared();
            phi_norm2 += phi.norm_squared();
            x_norm2 += x_new.norm_squared();
            blk.adjoint(&(&x_new - &xs[bi]), &mut dual_vec);
            blk.adjoint(&us[bi], &mut u_adj);
            xs[bi] = x_new;
        }
        let r_norm = r_norm2.sqrt();
        let s_norm = rho * dual_vec.norm();
        let eps_pri = cfg.tol_primal * (1.0 + phi_norm2.sqrt().max(x_norm2.sqrt()));
        let eps_dual = cfg.tol_dual * (1.0 + rho * u_adj.norm());
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
        if cfg.adaptive_rho && it % 10 == 9 {
            let scale = if r_norm / eps_pri > 10.0 * s_norm / eps_dual {
                2.0
            } else if s_norm / eps_dual > 10.0 * r_norm / eps_pri {
                0.5
            } else {
                1.0
            };
            if scale != 1.0 {
                rho *= scale;
                for u in &mut us {
                    *u /= scale;
                }
                if use_soft {
                    chol = factor(rho)?;
                }
            }
        }
    }

    let y_seq = sys.sequence_from(&y);
    let residual_norm = sys.residual_norm(&y_seq)?;
    // The splitting leaves PSD violations on the order of its primal tolerance.
    let certificate = flat_extension_rank_with_slack(
        &y_seq,
        sys.degree().max(1),
        cfg.rank_policy(),
        (10.0 * cfg.tol_primal).max(1e-8),
    )?;
    Ok(CompletionResult {
        y: y_seq,
        status: if converged {
            CompletionStatus::SdpConverged
        } else {
            CompletionStatus::SdpMaxIter
        },
        residual_norm,
        certificate,
        iterations,
        rounds: 1,
    })
}

/// Trace minimization followed by convex-iteration reweighting toward rank `k`.
///
/// Each round sets `C = W W^T` where `W` spans the eigenvectors of the current
/// `M_r(y)` beyond the top `k`, so the next solve penalizes exactly the energy
/// outside a rank-`k` subspace. Stops at the first flat certificate of rank
/// `k`, or after `cfg.rank_rounds` rounds; the best round (least trailing
/// eigenvalue mass) is returned.
pub fn solve_sdp_rank(
    sys: &MomentConstraintSystem,
    cfg: &SdpConfig,
    extra_psd: &[LocalizingIndex],
    k: usize,
) -> Result<CompletionResult> {
    let index = build_moment_index(sys.num_vars(), sys.degree());
    let tail_mass = |res: &CompletionResult| -> Result<(f64, DMatrix<f64>)> {
        let m = assemble(&index, &res.y)?;
        let (values, vectors) = linalg::sorted_sym_eigen(&m);
        let tail: f64 = values.iter().skip(k).map(|v| v.max(0.0)).sum();
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        let w = vectors
            .columns(k.min(m.nrows()), m.nrows().saturating_sub(k))
            .into_owned();
        Ok((tail / total.max(f64::MIN_POSITIVE), w))
    };
    let mut current = solve_sdp_nuclear(sys, cfg, extra_psd)?;
    let mut iterations = current.iterations;
    let mut rounds = 1;
    let (mut mass, mut w) = tail_mass(&current)?;
    let mut best = (mass, current.clone());
    let mut round_cfg = cfg.clone();
    while current.certificate != Some(k) && rounds <= cfg.rank_rounds && w.ncols() > 0 {
        round_cfg.scaling = Some(&w * w.transpose());
        current = solve_sdp(sys, &round_cfg, extra_psd, true)?;
        iterations += current.iterations;
        rounds += 1;
        (mass, w) = tail_mass(&current)?;
        if current.certificate == Some(k) || mass < best.0 {
            best = (mass, current.clone());
        }
    }
    let mut out = if current.certificate == Some(k) {
        current
    } else {
        best.1
    };
    out.iterations = iterations;
    out.rounds = rounds;
    Ok(out)
}
