//! Monomials and sparse real polynomials over the parameter variables.
//!
//! Every module downstream relies on one fixed monomial order: graded
//! lexicographic, where within a degree the exponent with the larger leading
//! entry comes first. For two variables that gives
//! `1, x1, x2, x1^2, x1*x2, x2^2, ...`.

use std::cmp::Ordering;
use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent vector of a monomial, one entry per variable.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn zero(num_vars: usize) -> Self {
        Self(vec![0; num_vars])
    }

    /// The exponent `e_p` of the single variable `p`.
    pub fn unit(num_vars: usize, p: usize) -> Self {
        let mut e = vec![0; num_vars];
        e[p] = 1;
        Self(e)
    }

    pub fn num_vars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    /// Entrywise sum, i.e. the exponent of the product of two monomials.
    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self - other` when `other` divides `self`.
    pub fn checked_div(&self, other: &Monomial) -> Option<Monomial> {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.checked_sub(*b))
            .collect::<Option<Vec<_>>>()
            .map(Monomial)
    }

    pub fn divides(&self, other: &Monomial) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Index<usize> for Monomial {
    type Output = u32;

    fn index(&self, i: usize) -> &u32 {
        &self.0[i]
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// All exponents of total degree exactly `degree`, in the module order.
pub fn monomials_of_degree(num_vars: usize, degree: u32) -> Vec<Monomial> {
    fn fill(out: &mut Vec<Monomial>, prefix: &mut Vec<u32>, remaining_vars: usize, left: u32) {
        if remaining_vars == 1 {
            prefix.push(left);
            out.push(Monomial(prefix.clone()));
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            fill(out, prefix, remaining_vars - 1, left - e);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if num_vars == 0 {
        return out;
    }
    fill(
        &mut out,
        &mut Vec::with_capacity(num_vars),
        num_vars,
        degree,
    );
    out
}

/// Ordered list of monomials with a position lookup.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    monomials: Vec<Monomial>,
    positions: HashMap<Monomial, usize>,
    num_vars: usize,
    degree: u32,
}

impl MonomialBasis {
    /// Builds a basis from an explicit monomial list (kept in the given order).
    pub fn from_monomials(num_vars: usize, monomials: Vec<Monomial>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(monomials.len());
        let mut degree = 0;
        for (i, m) in monomials.iter().enumerate() {
            if m.num_vars() != num_vars {
                return Err(Error::DimensionMismatch {
                    expected: num_vars,
                    got: m.num_vars(),
                });
            }
            degree = degree.max(m.degree());
            positions.insert(m.clone(), i);
        }
        Ok(Self {
            monomials,
            positions,
            num_vars,
            degree,
        })
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn get(&self, i: usize) -> &Monomial {
        &self.monomials[i]
    }

    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.positions.get(m).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Monomial> {
        self.monomials.iter()
    }

    /// The monomial vector `v(theta)` evaluated at a point.
    pub fn evaluate(&self, point: &[f64]) -> Vec<f64> {
        self.monomials.iter().map(|m| m.eval(point)).collect()
    }
}

/// Graded basis of every monomial in `num_vars` variables with degree at most `degree`.
///
/// Length is `C(num_vars + degree, degree)` and the basis for degree `r` is a
/// prefix of the basis for degree `r + 1`.
pub fn monomials_up_to(num_vars: usize, degree: u32) -> MonomialBasis {
    assert!(num_vars >= 1, "at least one variable is required");
    let monomials: Vec<Monomial> = (0..=degree)
        .flat_map(|d| monomials_of_degree(num_vars, d))
        .collect();
    let positions = monomials
        .iter()
        .enumerate()
        .map(|(i, m)| (m.clone(), i))
        .collect();
    MonomialBasis {
        monomials,
        positions,
        num_vars,
        degree,
    }
}

/// Sparse polynomial with real coefficients. Zero coefficients are never stored.
///
/// Serializes as `{"num_vars": n, "terms": [{"exponent": [..], "coefficient": c}, ..]}`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "PolynomialRepr", into = "PolynomialRepr")]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
    num_vars: usize,
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exponent: Monomial,
    coefficient: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolynomialRepr {
    num_vars: usize,
    terms: Vec<TermRepr>,
}

impl From<Polynomial> for PolynomialRepr {
    fn from(p: Polynomial) -> Self {
        Self {
            num_vars: p.num_vars,
            terms: p
                .terms
                .into_iter()
                .map(|(exponent, coefficient)| TermRepr {
                    exponent,
                    coefficient,
                })
                .collect(),
        }
    }
}

impl TryFrom<PolynomialRepr> for Polynomial {
    type Error = Error;

    fn try_from(r: PolynomialRepr) -> Result<Self> {
        Polynomial::from_terms(
            r.num_vars,
            r.terms.into_iter().map(|t| (t.exponent, t.coefficient)),
        )
    }
}

impl Polynomial {
    pub fn zero(num_vars: usize) -> Self {
        Self {
            terms: BTreeMap::new(),
            num_vars,
        }
    }

    pub fn constant(num_vars: usize, c: f64) -> Self {
        Self::monomial(Monomial::zero(num_vars), c)
    }

    /// The polynomial `x_p`.
    pub fn var(num_vars: usize, p: usize) -> Self {
        Self::monomial(Monomial::unit(num_vars, p), 1.0)
    }

    pub fn monomial(m: Monomial, coef: f64) -> Self {
        let num_vars = m.num_vars();
        let mut terms = BTreeMap::new();
        if coef != 0.0 {
            terms.insert(m, coef);
        }
        Self { terms, num_vars }
    }

    pub fn from_terms(
        num_vars: usize,
        terms: impl IntoIterator<Item = (Monomial, f64)>,
    ) -> Result<Self> {
        let mut p = Self::zero(num_vars);
        for (m, c) in terms {
            if m.num_vars() != num_vars {
                return Err(Error::DimensionMismatch {
                    expected: num_vars,
                    got: m.num_vars(),
                });
            }
            p.add_term(m, c);
        }
        Ok(p)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, f64> {
        &self.terms
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            Entry::Vacant(v) => {
                v.insert(c);
            }
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
        }
    }

    fn check_compatible(&self, other: &Polynomial) -> Result<()> {
        if self.num_vars != other.num_vars {
            return Err(Error::DimensionMismatch {
                expected: self.num_vars,
                got: other.num_vars,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.num_vars);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = Polynomial::zero(self.num_vars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    /// Multiplies by the monomial `x^m`.
    pub fn shift(&self, m: &Monomial) -> Polynomial {
        Polynomial {
            terms: self.terms.iter().map(|(k, c)| (k.mul(m), *c)).collect(),
            num_vars: self.num_vars,
        }
    }

    pub fn pow(&self, n: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.num_vars, 1.0);
        for _ in 0..n {
            out = out.mul(self).expect("same ring");
        }
        out
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.num_vars {
            return Err(Error::DimensionMismatch {
                expected: self.num_vars,
                got: point.len(),
            });
        }
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(point)).sum())
    }

    /// Embeds into a ring with more variables; variable `i` maps to `mapping[i]`.
    pub fn embed(&self, num_vars: usize, mapping: &[usize]) -> Polynomial {
        let mut out = Polynomial::zero(num_vars);
        for (m, c) in &self.terms {
            let mut e = vec![0; num_vars];
            for (i, &x) in m.exponents().iter().enumerate() {
                e[mapping[i]] += x;
            }
            out.add_term(Monomial(e), *c);
        }
        out
    }

    /// `f(offset + scale * x)`, with `scale` acting coordinatewise.
    pub fn affine_substitute(&self, offset: &[f64], scale: &[f64]) -> Result<Polynomial> {
        let n = self.num_vars;
        if offset.len() != n || scale.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: offset.len().min(scale.len()),
            });
        }
        let linear: Vec<Polynomial> = (0..n)
            .map(|p| {
                Polynomial::constant(n, offset[p])
                    .add(&Polynomial::var(n, p).scale(scale[p]))
                    .expect("same ring")
            })
            .collect();
        let mut powers: Vec<Vec<Polynomial>> = linear
            .iter()
            .map(|l| vec![Polynomial::constant(n, 1.0), l.clone()])
            .collect();
        let mut out = Polynomial::zero(n);
        for (m, c) in &self.terms {
            let mut term = Polynomial::constant(n, *c);
            for (p, &e) in m.exponents().iter().enumerate() {
                while powers[p].len() <= e as usize {
                    let next = powers[p].last().expect("nonempty").mul(&linear[p])?;
                    powers[p].push(next);
                }
                term = term.mul(&powers[p][e as usize])?;
            }
            out = out.add(&term)?;
        }
        Ok(out)
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;

    fn add(self, rhs: &Polynomial) -> Polynomial {
        Polynomial::add(self, rhs).expect("polynomials over different rings")
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (p, &e) in m.exponents().iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*x{}", p + 1)?,
                    _ => write!(f, "*x{}^{}", p + 1, e)?,
                }
            }
        }
        Ok(())
    }
}
