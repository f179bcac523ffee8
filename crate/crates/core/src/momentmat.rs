//! Truncated moment matrices, the Riesz functional, localizing matrices and
//! flat-extension certification.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, RankPolicy};
use crate::polyring::{monomials_up_to, Monomial, MonomialBasis, Polynomial};

/// Linear functional coefficients: applying them to `y` gives `sum a_alpha y_alpha`.
pub type RieszMap = BTreeMap<Monomial, f64>;

/// Parameter-space moments `y_alpha = L_y(theta^alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSequence {
    values: BTreeMap<Monomial, f64>,
    num_vars: usize,
    max_degree: u32,
}

impl MomentSequence {
    pub fn new(num_vars: usize, values: BTreeMap<Monomial, f64>) -> Result<Self> {
        let mut max_degree = 0;
        for m in values.keys() {
            if m.num_vars() != num_vars {
                return Err(Error::DimensionMismatch {
                    expected: num_vars,
                    got: m.num_vars(),
                });
            }
            max_degree = max_degree.max(m.degree());
        }
        Ok(Self {
            values,
            num_vars,
            max_degree,
        })
    }

    /// Moments `sum_k w_k (theta_k)^alpha` of a weighted atomic measure, for all `|alpha| <= max_degree`.
    pub fn from_atoms(atoms: &[Vec<f64>], weights: &[f64], max_degree: u32) -> Self {
        assert_eq!(atoms.len(), weights.len());
        let num_vars = atoms.first().map_or(1, Vec::len);
        let basis = monomials_up_to(num_vars, max_degree);
        let values = basis
            .iter()
            .map(|m| {
                let v = atoms.iter().zip(weights).map(|(a, w)| w * m.eval(a)).sum();
                (m.clone(), v)
            })
            .collect();
        Self {
            values,
            num_vars,
            max_degree,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn values(&self) -> &BTreeMap<Monomial, f64> {
        &self.values
    }

    pub fn get(&self, m: &Monomial) -> Result<f64> {
        self.values
            .get(m)
            .copied()
            .ok_or_else(|| Error::MissingMoment(m.clone()))
    }

    pub fn contains(&self, m: &Monomial) -> bool {
        self.values.contains_key(m)
    }

    pub fn insert(&mut self, m: Monomial, v: f64) {
        self.max_degree = self.max_degree.max(m.degree());
        self.values.insert(m, v);
    }

    /// `L_y` applied to a coefficient map.
    pub fn apply(&self, coeffs: &RieszMap) -> Result<f64> {
        coeffs.iter().map(|(m, c)| self.get(m).map(|v| c * v)).sum()
    }

    /// Restriction to exponents of degree at most `degree`.
    pub fn truncate(&self, degree: u32) -> Self {
        let values: BTreeMap<_, _> = self
            .values
            .iter()
            .filter(|(m, _)| m.degree() <= degree)
            .map(|(m, v)| (m.clone(), *v))
            .collect();
        let max_degree = values.keys().map(Monomial::degree).max().unwrap_or(0);
        Self {
            values,
            num_vars: self.num_vars,
            max_degree,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    exponent: Monomial,
    value: f64,
}

impl Serialize for MomentSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<MomentEntry> = self
            .values
            .iter()
            .map(|(m, v)| MomentEntry {
                exponent: m.clone(),
                value: *v,
            })
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MomentSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<MomentEntry>::deserialize(d)?;
        let num_vars = entries.first().map_or(1, |e| e.exponent.num_vars());
        let values = entries.into_iter().map(|e| (e.exponent, e.value)).collect();
        MomentSequence::new(num_vars, values).map_err(serde::de::Error::custom)
    }
}

/// Exponent-keyed maps as JSON lists of `{"exponent": [..], "value": v}`.
mod exponent_list {
    use super::{MomentEntry, RieszMap};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &RieszMap, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<MomentEntry> = map
            .iter()
            .map(|(m, v)| MomentEntry {
                exponent: m.clone(),
                value: *v,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RieszMap, D::Error> {
        Ok(Vec::<MomentEntry>::deserialize(d)?
            .into_iter()
            .map(|e| (e.exponent, e.value))
            .collect())
    }
}

/// Coefficient map of `L_y(f)`; the constant term multiplies `y_0`.
pub fn riesz_coefficients(f: &Polynomial) -> RieszMap {
    f.terms().clone()
}

/// Symbolic moment matrix: cell `(i, j)` holds the exponent `alpha_i + alpha_j`.
#[derive(Clone, Debug)]
pub struct MomentIndex {
    basis: MonomialBasis,
    cells: Vec<Vec<Monomial>>,
}

impl MomentIndex {
    pub fn from_basis(basis: MonomialBasis) -> Self {
        let cells = basis
            .iter()
            .map(|a| basis.iter().map(|b| a.mul(b)).collect())
            .collect();
        Self { basis, cells }
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn size(&self) -> usize {
        self.basis.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> &Monomial {
        &self.cells[i][j]
    }

    /// Cells grouped by the exponent they share.
    pub fn shared_cells(&self) -> BTreeMap<Monomial, Vec<(usize, usize)>> {
        let mut groups: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, row) in self.cells.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                groups.entry(m.clone()).or_default().push((i, j));
            }
        }
        groups
    }

    /// Every distinct exponent appearing in the matrix, in grlex order.
    pub fn exponents(&self) -> Vec<Monomial> {
        self.shared_cells().into_keys().collect()
    }
}

/// Index of `M_r(y)` over the full graded basis of degree `r`.
pub fn build_moment_index(num_vars: usize, r: u32) -> MomentIndex {
    MomentIndex::from_basis(monomials_up_to(num_vars, r))
}

/// Numeric moment matrix `A[i, j] = y(alpha_i + alpha_j)`.
pub fn assemble(index: &MomentIndex, y: &MomentSequence) -> Result<DMatrix<f64>> {
    let n = index.size();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = y.get(index.cell(i, j))?;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Localizing matrix index: cell `(i, j)` is `L_y(theta^(alpha_i + alpha_j) g)`.
#[derive(Clone, Debug)]
pub struct LocalizingIndex {
    basis: MonomialBasis,
    cells: Vec<Vec<RieszMap>>,
}

impl LocalizingIndex {
    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn size(&self) -> usize {
        self.basis.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> &RieszMap {
        &self.cells[i][j]
    }
}

/// Builds the localizing index of `g` over the degree-`r` basis. The largest
/// exponent touched is `deg(g) + 2r`, which must not exceed `max_degree`.
pub fn localizing_index(g: &Polynomial, r: u32, max_degree: u32) -> Result<LocalizingIndex> {
    let needed = g.degree() + 2 * r;
    if needed > max_degree {
        return Err(Error::DegreeOverflow {
            degree: needed,
            available: max_degree,
        });
    }
    let basis = monomials_up_to(g.num_vars(), r);
    let cells = basis
        .iter()
        .map(|a| {
            basis
                .iter()
                .map(|b| riesz_coefficients(&g.shift(&a.mul(b))))
                .collect()
        })
        .collect();
    Ok(LocalizingIndex { basis, cells })
}

pub fn assemble_localizing(index: &LocalizingIndex, y: &MomentSequence) -> Result<DMatrix<f64>> {
    let n = index.size();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = y.apply(index.cell(i, j))?;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// One linear condition `sum_alpha a_alpha y_alpha = rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMomentConstraint {
    #[serde(with = "exponent_list")]
    coefficients: RieszMap,
    rhs: f64,
}

impl LinearMomentConstraint {
    pub fn new(coefficients: RieszMap, rhs: f64) -> Result<Self> {
        let coefficients: RieszMap = coefficients
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .collect();
        if coefficients.is_empty() {
            return Err(Error::EmptyConstraint);
        }
        Ok(Self { coefficients, rhs })
    }

    /// `L_y(f) = rhs`.
    pub fn from_polynomial(f: &Polynomial, rhs: f64) -> Result<Self> {
        Self::new(riesz_coefficients(f), rhs)
    }

    pub fn coefficients(&self) -> &RieszMap {
        &self.coefficients
    }

    pub fn rhs(&self) -> f64 {
        self.rhs
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coefficients: self
                .coefficients
                .iter()
                .map(|(m, c)| (m.clone(), c * s))
                .collect(),
            rhs: self.rhs * s,
        }
    }

    pub fn residual(&self, y: &MomentSequence) -> Result<f64> {
        Ok(y.apply(&self.coefficients)? - self.rhs)
    }

    pub fn max_degree(&self) -> u32 {
        self.coefficients
            .keys()
            .map(Monomial::degree)
            .max()
            .unwrap_or(0)
    }
}

/// Constraints `L_y(theta^beta g) = 0` for every `|beta| <= max_shift_degree`.
pub fn equality_constraint_family(
    g: &Polynomial,
    max_shift_degree: u32,
) -> Result<Vec<LinearMomentConstraint>> {
    if g.is_zero() {
        return Err(Error::EmptyConstraint);
    }
    monomials_up_to(g.num_vars(), max_shift_degree)
        .iter()
        .map(|beta| LinearMomentConstraint::from_polynomial(&g.shift(beta), 0.0))
        .collect()
}

/// Rank `K` of `M_r(y)` when `rank M_{r-1}(y) = rank M_r(y)` and `M_r(y)` is
/// PSD up to `psd_slack * sigma_max`; `None` when no certificate holds.
pub fn flat_extension_rank(
    y: &MomentSequence,
    r: u32,
    policy: RankPolicy,
) -> Result<Option<usize>> {
    flat_extension_rank_with_slack(y, r, policy, 1e-8)
}

pub fn flat_extension_rank_with_slack(
    y: &MomentSequence,
    r: u32,
    policy: RankPolicy,
    psd_slack: f64,
) -> Result<Option<usize>> {
    assert!(r >= 1, "flat extension needs r >= 1");
    let index = build_moment_index(y.num_vars(), r);
    let m = assemble(&index, y)?;
    Ok(flat_rank_of_matrix(
        &m,
        monomials_up_to(y.num_vars(), r - 1).len(),
        policy,
        psd_slack,
    ))
}

/// Flat check on an assembled `M_r` whose leading `lower` rows/cols form `M_{r-1}`.
pub fn flat_rank_of_matrix(
    m: &DMatrix<f64>,
    lower: usize,
    policy: RankPolicy,
    psd_slack: f64,
) -> Option<usize> {
    let sigma_max = linalg::singular_values(m).first().copied().unwrap_or(0.0);
    if linalg::min_eigenvalue(m) < -psd_slack * sigma_max {
        return None;
    }
    // Both ranks are judged against the same scale so that a small leading
    // block is not declared full rank on its own terms.
    let rank_r = linalg::numeric_rank(m, policy);
    let tau = policy.threshold(sigma_max);
    let lower_block = m.view((0, 0), (lower, lower)).into_owned();
    let rank_lower = linalg::singular_values(&lower_block)
        .iter()
        .filter(|&&s| s > tau)
        .count();
    (rank_r == rank_lower).then_some(rank_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(e: &[u32]) -> Monomial {
        Monomial::new(e.to_vec())
    }

    #[test]
    fn riesz_examples() {
        let f = Polynomial::from_terms(
            2,
            [(m(&[3, 0]), 2.0), (m(&[2, 1]), -1.0), (m(&[0, 0]), 3.0)],
        )
        .unwrap();
        let r = riesz_coefficients(&f);
        assert_eq!(r.len(), 3);
        assert_eq!(r[&m(&[3, 0])], 2.0);
        assert_eq!(r[&m(&[2, 1])], -1.0);
        assert_eq!(r[&m(&[0, 0])], 3.0);

        let h3 = Polynomial::from_terms(2, [(m(&[3, 0]), 1.0), (m(&[1, 1]), 3.0)]).unwrap();
        let r = riesz_coefficients(&h3);
        assert_eq!(r, BTreeMap::from([(m(&[3, 0]), 1.0), (m(&[1, 1]), 3.0)]));

        let one = riesz_coefficients(&Polynomial::constant(3, 1.0));
        assert_eq!(one, BTreeMap::from([(m(&[0, 0, 0]), 1.0)]));
    }

    #[test]
    fn index_cells() {
        let idx = build_moment_index(1, 1);
        assert_eq!(idx.cell(0, 0), &m(&[0]));
        assert_eq!(idx.cell(0, 1), &m(&[1]));
        assert_eq!(idx.cell(1, 1), &m(&[2]));

        let idx = build_moment_index(2, 1);
        assert_eq!(idx.cell(1, 2), &m(&[1, 1]));

        // Variables (xi, c): row xi^2, column c holds y_{2,1}.
        let idx = build_moment_index(2, 2);
        let b = idx.basis();
        let row = b.position(&m(&[2, 0])).unwrap();
        let col = b.position(&m(&[0, 1])).unwrap();
        assert_eq!(idx.cell(row, col), &m(&[2, 1]));
    }

    #[test]
    fn gaussian_moment_matrix_layout_is_contained() {
        // Row/column labels 1, xi, xi^2, c, xi^3, xi*c of the 1D Gaussian grid.
        let labels = [
            m(&[0, 0]),
            m(&[1, 0]),
            m(&[2, 0]),
            m(&[0, 1]),
            m(&[3, 0]),
            m(&[1, 1]),
        ];
        let grid = [
            ["0,0", "1,0", "2,0", "0,1", "3,0", "1,1"],
            ["1,0", "2,0", "3,0", "1,1", "4,0", "2,1"],
            ["2,0", "3,0", "4,0", "2,1", "5,0", "3,1"],
            ["0,1", "1,1", "2,1", "0,2", "3,1", "1,2"],
            ["3,0", "4,0", "5,0", "3,1", "6,0", "4,1"],
            ["1,1", "2,1", "3,1", "1,2", "4,1", "2,2"],
        ];
        let idx = build_moment_index(2, 3);
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                let pi = idx.basis().position(li).unwrap();
                let pj = idx.basis().position(lj).unwrap();
                let e = idx.cell(pi, pj);
                assert_eq!(format!("{},{}", e[0], e[1]), grid[i][j]);
            }
        }
    }

    #[test]
    fn assemble_two_atoms() {
        let y = MomentSequence::from_atoms(&[vec![1.0], vec![-1.0]], &[0.5, 0.5], 4);
        let a = assemble(&build_moment_index(1, 2), &y).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((a - expected).norm() < 1e-15);
    }

    #[test]
    fn assemble_point_mass_at_origin() {
        let y = MomentSequence::from_atoms(&[vec![0.0, 0.0]], &[1.0], 4);
        let a = assemble(&build_moment_index(2, 2), &y).unwrap();
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(a.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn assemble_reports_missing_exponent() {
        let y = MomentSequence::from_atoms(&[vec![1.0]], &[1.0], 2);
        match assemble(&build_moment_index(1, 2), &y) {
            Err(Error::MissingMoment(e)) => assert_eq!(e, m(&[3])),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn localizing_examples() {
        // g = c - 1 with variables (c, xi).
        let g = Polynomial::from_terms(2, [(m(&[1, 0]), 1.0), (m(&[0, 0]), -1.0)]).unwrap();
        let idx = localizing_index(&g, 1, 3).unwrap();
        assert_eq!(
            idx.cell(0, 0),
            &BTreeMap::from([(m(&[1, 0]), 1.0), (m(&[0, 0]), -1.0)])
        );
        // row c, column xi: y_{2,1} - y_{1,1}
        assert_eq!(
            idx.cell(1, 2),
            &BTreeMap::from([(m(&[2, 1]), 1.0), (m(&[1, 1]), -1.0)])
        );
        assert!(matches!(
            localizing_index(&g, 2, 3),
            Err(Error::DegreeOverflow {
                degree: 5,
                available: 3
            })
        ));

        let one = Polynomial::constant(2, 1.0);
        let li = localizing_index(&one, 2, 4).unwrap();
        let mi = build_moment_index(2, 2);
        for i in 0..mi.size() {
            for j in 0..mi.size() {
                assert_eq!(
                    li.cell(i, j),
                    &BTreeMap::from([(mi.cell(i, j).clone(), 1.0)])
                );
            }
        }

        let c = Polynomial::var(2, 0);
        let li = localizing_index(&c, 0, 1).unwrap();
        assert_eq!(li.size(), 1);
        assert_eq!(li.cell(0, 0), &BTreeMap::from([(m(&[1, 0]), 1.0)]));
    }

    #[test]
    fn parabola_family() {
        let g = Polynomial::from_terms(2, [(m(&[1, 0]), 1.0), (m(&[0, 2]), -1.0)]).unwrap();
        let fam = equality_constraint_family(&g, 0).unwrap();
        assert_eq!(fam.len(), 1);
        assert_eq!(
            fam[0].coefficients(),
            &BTreeMap::from([(m(&[1, 0]), 1.0), (m(&[0, 2]), -1.0)])
        );
        assert_eq!(fam[0].rhs(), 0.0);

        let fam = equality_constraint_family(&g, 2).unwrap();
        assert_eq!(fam.len(), 6);
        // beta = (1, 1)
        assert!(fam
            .iter()
            .any(|c| c.coefficients() == &BTreeMap::from([(m(&[2, 1]), 1.0), (m(&[1, 3]), -1.0)])));

        assert!(matches!(
            equality_constraint_family(&Polynomial::zero(2), 1),
            Err(Error::EmptyConstraint)
        ));
    }

    #[test]
    fn flat_examples() {
        let p = RankPolicy::default();
        let y = MomentSequence::from_atoms(&[vec![1.0], vec![-1.0]], &[0.5, 0.5], 4);
        assert_eq!(flat_extension_rank(&y, 2, p).unwrap(), Some(2));

        for r in 1..4 {
            let y = MomentSequence::from_atoms(&[vec![0.7, -1.2]], &[1.0], 2 * r);
            assert_eq!(flat_extension_rank(&y, r, p).unwrap(), Some(1));
        }

        // Indefinite: y_2 < y_1^2 makes M_1 indefinite.
        let mut values = BTreeMap::new();
        values.insert(m(&[0]), 1.0);
        values.insert(m(&[1]), 1.0);
        values.insert(m(&[2]), 0.2);
        let y = MomentSequence::new(1, values).unwrap();
        assert_eq!(flat_extension_rank(&y, 1, p).unwrap(), None);
    }

    #[test]
    fn serialization_is_sorted_pairs() {
        let y = MomentSequence::from_atoms(&[vec![2.0]], &[1.0], 2);
        let s = serde_json::to_string(&y).unwrap();
        assert_eq!(
            s,
            r#"[{"exponent":[0],"value":1.0},{"exponent":[1],"value":2.0},{"exponent":[2],"value":4.0}]"#
        );
        let back: MomentSequence = serde_json::from_str(&s).unwrap();
        assert_eq!(back, y);
    }

    fn atoms_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(k, p)| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, p), k),
                prop::collection::vec(0.1f64..1.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn atomic_moment_matrix_is_sum_of_outer_products((atoms, w) in atoms_strategy(), r in 1u32..3) {
            let total: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / total).collect();
            let y = MomentSequence::from_atoms(&atoms, &w, 2 * r);
            let idx = build_moment_index(atoms[0].len(), r);
            let a = assemble(&idx, &y).unwrap();
            let mut direct = DMatrix::zeros(idx.size(), idx.size());
            for (atom, wk) in atoms.iter().zip(&w) {
                let v = nalgebra::DVector::from_vec(idx.basis().evaluate(atom));
                direct += *wk * &v * v.transpose();
            }
            prop_assert!((&a - &direct).amax() <= 1e-12 * (1.0 + direct.amax()));
            prop_assert!(linalg::min_eigenvalue(&a) >= -1e-10 * (1.0 + a.amax()));
            prop_assert!(linalg::numeric_rank(&a, RankPolicy::default()) <= atoms.len());
        }

        #[test]
        fn localizing_matrix_is_psd_when_g_nonnegative((atoms, w) in atoms_strategy()) {
            let p = atoms[0].len();
            // g = 1 + x_1^2 >= 0 everywhere
            let g = Polynomial::constant(p, 1.0).add(&Polynomial::var(p, 0).pow(2)).unwrap();
            let y = MomentSequence::from_atoms(&atoms, &w, 4);
            let li = localizing_index(&g, 1, 4).unwrap();
            let a = assemble_localizing(&li, &y).unwrap();
            prop_assert!(linalg::min_eigenvalue(&a) >= -1e-10 * (1.0 + a.amax()));
        }

        #[test]
        fn riesz_is_linear(lambda in -3.0f64..3.0, (atoms, w) in atoms_strategy()) {
            let p = atoms[0].len();
            let f = Polynomial::var(p, 0).pow(2).add(&Polynomial::constant(p, 2.0)).unwrap();
            let g = Polynomial::var(p, p - 1).pow(3);
            let y = MomentSequence::from_atoms(&atoms, &w, 3);
            let lhs = y.apply(&riesz_coefficients(&f.add(&g.scale(lambda)).unwrap())).unwrap();
            let rhs = y.apply(&riesz_coefficients(&f)).unwrap()
                + lambda * y.apply(&riesz_coefficients(&g)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
