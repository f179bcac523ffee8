//! Model adapters.
//!
//! Each adapter knows its observation functions `phi_n(x)`, the polynomial
//! `f_n(theta) = E[phi_n(x) | theta]` of a single component, how to sample
//! from a component, and how its parameters are laid out.
//!
//! | model | parameters per component |
//! |-------|--------------------------|
//! | spherical Gaussian, `D` dims | `xi_1..xi_D, c` |
//! | diagonal Gaussian, `D` dims | `xi_1..xi_D, c_1..c_D` |
//! | linear regression, known noise | `w_1..w_D` |
//! | linear regression, noise as parameter | `w_1..w_D, s` (`s = sigma^2`) |
//! | binomial with `m` trials | `p` |
//! | three-view mixture, `D` per view | `xi^(1), xi^(2), xi^(3)` |

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyring::{monomials_of_degree, monomials_up_to, Monomial, Polynomial};

/// Highest Gaussian moment order with a generated polynomial.
pub const MAX_GAUSSIAN_ORDER: u32 = 8;
/// Highest power of the regression response that is supported.
pub const MAX_RESPONSE_POWER: u32 = 4;

/// Coefficients of `h_a(xi, c) = E[(xi + sqrt(c) Z)^a]` as `(xi power, c power, coefficient)`.
///
/// The coefficient of `xi^(a-2i) c^i` is `a! / ((a-2i)! i! 2^i)`, the absolute
/// value of the matching coefficient of the probabilists' Hermite polynomial.
pub fn hermite_moment_coeffs(a: u32) -> Vec<(u32, u32, f64)> {
    (0..=a / 2)
        .map(|i| {
            let xi_pow = a - 2 * i;
            let mut coef = 1.0;
            // a! / (a-2i)!
            for t in (xi_pow + 1)..=a {
                coef *= t as f64;
            }
            for t in 1..=i {
                coef /= 2.0 * t as f64;
            }
            (xi_pow, i, coef.round())
        })
        .collect()
}

/// `h_a` as a polynomial in `(xi, c)`, embedded at variable positions `xi_var`, `c_var`.
fn hermite_poly(a: u32, num_vars: usize, xi_var: usize, c_var: usize) -> Polynomial {
    let terms = hermite_moment_coeffs(a).into_iter().map(|(xp, cp, coef)| {
        let mut e = vec![0; num_vars];
        e[xi_var] += xp;
        e[c_var] += cp;
        (Monomial::new(e), coef)
    });
    Polynomial::from_terms(num_vars, terms).expect("consistent ring")
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

fn double_factorial_odd(n: u32) -> f64 {
    // (n-1)!! for even n, 0 for odd n: the n-th standard normal moment
    if n % 2 == 1 {
        return 0.0;
    }
    (1..n).step_by(2).map(f64::from).product()
}

/// Distribution of the regression covariates (independent of the component).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum CovariateDistribution {
    #[default]
    StandardNormal,
    /// Independent uniform coordinates on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl CovariateDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::StandardNormal => StandardNormal.sample(rng),
            Self::Uniform { half_width } => rng.random_range(-half_width..=*half_width),
        }
    }

    fn univariate_moment(&self, n: u32) -> f64 {
        match self {
            Self::StandardNormal => double_factorial_odd(n),
            Self::Uniform { half_width } => {
                if n % 2 == 1 {
                    0.0
                } else {
                    half_width.powi(n as i32) / (n as f64 + 1.0)
                }
            }
        }
    }

    /// Exact `E[x^alpha]` for independent coordinates.
    pub fn moment(&self, alpha: &Monomial) -> f64 {
        alpha
            .exponents()
            .iter()
            .map(|&e| self.univariate_moment(e))
            .product()
    }
}

/// How the regression noise variance enters the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressionNoise {
    /// Shared, known `sigma^2`.
    Known { variance: f64 },
    /// Per-component `sigma_k^2` estimated as the last parameter.
    Parameter,
    /// Per-component variances treated as fixed coefficients rather than
    /// parameters. Not separable: the moment conditions would depend on the
    /// component through the coefficients.
    PerComponentCoefficient { variances: Vec<f64> },
}

/// Emission distribution of one view of the multiview model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Emission {
    /// One-hot draw from the categorical distribution `xi^(l)`.
    OneHot,
    /// `xi^(l) + sigma * N(0, I)`.
    Gaussian { sigma: f64 },
}

/// Serializable model description (the nuisance inputs included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    GaussianSpherical {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_order: Option<u32>,
    },
    #[serde(rename = "gaussian-diag")]
    GaussianDiagonal {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_order: Option<u32>,
    },
    LinearRegression {
        dim: usize,
        noise: RegressionNoise,
        #[serde(default = "default_x_degree")]
        max_x_degree: u32,
        #[serde(default = "default_y_power")]
        max_y_power: u32,
        #[serde(default)]
        covariates: CovariateDistribution,
    },
    Binomial {
        trials: u32,
    },
    Multiview {
        dim: usize,
        emission: Emission,
    },
}

fn default_x_degree() -> u32 {
    3
}

fn default_y_power() -> u32 {
    3
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianSpherical { .. } => "gaussian-spherical",
            Self::GaussianDiagonal { .. } => "gaussian-diag",
            Self::LinearRegression { .. } => "linear-regression",
            Self::Binomial { .. } => "binomial",
            Self::Multiview { .. } => "multiview",
        }
    }
}

/// One observation function `phi_n`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Observation {
    /// `x^alpha` over the data columns.
    Power { alpha: Monomial },
    /// `x^alpha * y^b` for regression data (`y` is the last column).
    Response { alpha: Monomial, power: u32 },
    /// `1[x = value]`.
    Indicator { value: u32 },
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Power { alpha } => write!(f, "x^{alpha}"),
            Self::Response { alpha, power } => write!(f, "x^{alpha} y^{power}"),
            Self::Indicator { value } => write!(f, "1[x={value}]"),
        }
    }
}

/// Where a coefficient of a moment polynomial comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientInput {
    Constant,
    DataMoment(Monomial),
    KnownConstant(&'static str),
    /// Depends on which component generated the point.
    ComponentSpecific(&'static str),
}

/// Outcome of the separability check.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityReport {
    pub separable: bool,
    pub witness: Option<(Observation, String)>,
}

/// Data-side moments `E[x^alpha]` consumed as polynomial coefficients.
pub type DataMoments = BTreeMap<Monomial, f64>;

/// Estimated observation means plus any data-side coefficient moments.
#[derive(Clone, Debug, Default)]
pub struct ObservationEstimates {
    pub means: Vec<(Observation, f64)>,
    pub data_moments: DataMoments,
    /// Standard errors of `means` when they come from a sample.
    pub std_errors: Option<Vec<f64>>,
}

/// Rows of observations; each row has `ModelAdapter::data_columns` entries.
pub type Dataset = Vec<Vec<f64>>;

/// Mixture with known parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub model: ModelSpec,
    pub weights: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

impl MixtureSpec {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        let adapter = ModelAdapter::new(self.model.clone())?;
        if self.components.is_empty() {
            return Err(Error::InvalidSpec("mixture has no components".into()));
        }
        if self.weights.len() != self.components.len() {
            return Err(Error::InvalidSpec(format!(
                "{} weights for {} components",
                self.weights.len(),
                self.components.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidSpec("weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("weights sum to {total}, not 1")));
        }
        if let ModelSpec::LinearRegression {
            noise: RegressionNoise::PerComponentCoefficient { variances },
            ..
        } = &self.model
        {
            if variances.len() != self.components.len() {
                return Err(Error::InvalidSpec(
                    "one noise variance per component required".into(),
                ));
            }
        }
        for theta in &self.components {
            adapter.validate_params(theta)?;
        }
        Ok(())
    }
}

/// Stateless per-model logic built from a [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct ModelAdapter {
    spec: ModelSpec,
}

impl ModelAdapter {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        match &spec {
            ModelSpec::GaussianSpherical { dim, max_order }
            | ModelSpec::GaussianDiagonal { dim, max_order } => {
                if *dim == 0 {
                    return bad("dimension must be positive".into());
                }
                if let Some(o) = max_order {
                    if *o == 0 || *o > MAX_GAUSSIAN_ORDER {
                        return bad(format!("max_order must be in 1..={MAX_GAUSSIAN_ORDER}"));
                    }
                }
            }
            ModelSpec::LinearRegression {
                dim,
                noise,
                max_y_power,
                ..
            } => {
                if *dim == 0 {
                    return bad("dimension must be positive".into());
                }
                if *max_y_power > MAX_RESPONSE_POWER {
                    return bad(format!("max_y_power must be at most {MAX_RESPONSE_POWER}"));
                }
                if let RegressionNoise::Known { variance } = noise {
                    if !(*variance >= 0.0) {
                        return bad("noise variance must be nonnegative".into());
                    }
                }
            }
            ModelSpec::Binomial { trials } => {
                if *trials == 0 {
                    return bad("binomial needs at least one trial".into());
                }
            }
            ModelSpec::Multiview { dim, .. } => {
                if *dim == 0 {
                    return bad("dimension must be positive".into());
                }
            }
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    /// Parameters per component.
    pub fn num_params(&self) -> usize {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } => dim + 1,
            ModelSpec::GaussianDiagonal { dim, .. } => 2 * dim,
            ModelSpec::LinearRegression { dim, noise, .. } => match noise {
                RegressionNoise::Parameter => dim + 1,
                _ => *dim,
            },
            ModelSpec::Binomial { .. } => 1,
            ModelSpec::Multiview { dim, .. } => 3 * dim,
        }
    }

    /// Columns of a data row.
    pub fn data_columns(&self) -> usize {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } | ModelSpec::GaussianDiagonal { dim, .. } => {
                *dim
            }
            ModelSpec::LinearRegression { dim, .. } => dim + 1,
            ModelSpec::Binomial { .. } => 1,
            ModelSpec::Multiview { dim, .. } => 3 * dim,
        }
    }

    /// Sizes of the views when the model has a multiview layout.
    pub fn views(&self) -> Option<Vec<usize>> {
        match &self.spec {
            ModelSpec::Multiview { dim, .. } => Some(vec![*dim; 3]),
            _ => None,
        }
    }

    fn gaussian_order(&self) -> u32 {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, max_order }
            | ModelSpec::GaussianDiagonal { dim, max_order } => {
                max_order.unwrap_or(if *dim == 1 { 6 } else { 4 })
            }
            _ => 0,
        }
    }

    /// Affine map `theta = offset + scale * theta'` that brings parameters to
    /// unit scale. Gaussians use the pooled mean and variance of each
    /// coordinate; other models use the identity.
    pub fn parameter_normalization(&self, est: &ObservationEstimates) -> (Vec<f64>, Vec<f64>) {
        let p = self.num_params();
        let identity = (vec![0.0; p], vec![1.0; p]);
        let (dim, spherical) = match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } => (*dim, true),
            ModelSpec::GaussianDiagonal { dim, .. } => (*dim, false),
            _ => return identity,
        };
        let mean_of = |alpha: Monomial| {
            est.means
                .iter()
                .find(|(o, _)| {
                    *o == Observation::Power {
                        alpha: alpha.clone(),
                    }
                })
                .map(|(_, v)| *v)
        };
        let mut offset = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut vars = Vec::with_capacity(dim);
        for d in 0..dim {
            let unit = Monomial::unit(dim, d);
            let (Some(m1), Some(m2)) = (mean_of(unit.clone()), mean_of(unit.mul(&unit))) else {
                return identity;
            };
            let var = m2 - m1 * m1;
            if !(var > 0.0) {
                return identity;
            }
            offset[d] = m1;
            scale[d] = var.sqrt();
            vars.push(var);
        }
        if spherical {
            scale[dim] = vars.iter().sum::<f64>() / dim as f64;
        } else {
            scale[dim..].copy_from_slice(&vars);
        }
        (offset, scale)
    }

    /// Parameter-domain inequalities `g(theta) >= 0` (nonnegative variances).
    pub fn domain_inequalities(&self) -> Vec<Polynomial> {
        let p = self.num_params();
        self.variance_indices()
            .into_iter()
            .map(|i| Polynomial::var(p, i))
            .collect()
    }

    /// Parameter positions holding variances (which must stay nonnegative).
    pub fn variance_indices(&self) -> Vec<usize> {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } => vec![*dim],
            ModelSpec::GaussianDiagonal { dim, .. } => (*dim..2 * dim).collect(),
            ModelSpec::LinearRegression {
                dim,
                noise: RegressionNoise::Parameter,
                ..
            } => vec![*dim],
            _ => Vec::new(),
        }
    }

    /// Default moment-matrix degree `r` for a `k`-component fit.
    pub fn default_degree(&self, k: usize) -> u32 {
        match &self.spec {
            ModelSpec::GaussianSpherical { .. } | ModelSpec::GaussianDiagonal { .. } => {
                self.gaussian_order().div_ceil(2).max(1)
            }
            ModelSpec::LinearRegression { max_y_power, .. } => (max_y_power + 1).div_ceil(2).max(1),
            // Every indicator polynomial has degree `trials`.
            ModelSpec::Binomial { trials } => (k as u32).max(trials.div_ceil(2)).max(1),
            ModelSpec::Multiview { .. } => 2,
        }
    }

    /// Default observation functions.
    pub fn observations(&self) -> Vec<Observation> {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } | ModelSpec::GaussianDiagonal { dim, .. } => {
                (1..=self.gaussian_order())
                    .flat_map(|d| monomials_of_degree(*dim, d))
                    .map(|alpha| Observation::Power { alpha })
                    .collect()
            }
            ModelSpec::LinearRegression {
                dim,
                max_x_degree,
                max_y_power,
                ..
            } => {
                let mut out = Vec::new();
                for power in 0..=*max_y_power {
                    for alpha in monomials_up_to(*dim, *max_x_degree).iter() {
                        if power == 0 && alpha.is_zero() {
                            continue;
                        }
                        out.push(Observation::Response {
                            alpha: alpha.clone(),
                            power,
                        });
                    }
                }
                out
            }
            ModelSpec::Binomial { trials } => (0..=*trials)
                .map(|value| Observation::Indicator { value })
                .collect(),
            ModelSpec::Multiview { dim, .. } => multiview_exponents(*dim)
                .into_iter()
                .map(|alpha| Observation::Power { alpha })
                .collect(),
        }
    }

    /// Data-side moments `E[x^alpha]` used as coefficients (regression only).
    pub fn required_data_moments(&self) -> Vec<Monomial> {
        match &self.spec {
            ModelSpec::LinearRegression {
                dim,
                max_x_degree,
                max_y_power,
                ..
            } => monomials_up_to(*dim, max_x_degree + max_y_power)
                .monomials()
                .to_vec(),
            _ => Vec::new(),
        }
    }

    /// Evaluates `phi(row)`.
    pub fn observe(&self, obs: &Observation, row: &[f64]) -> f64 {
        match obs {
            Observation::Power { alpha } => alpha.eval(row),
            Observation::Response { alpha, power } => {
                let d = alpha.num_vars();
                alpha.eval(&row[..d]) * row[d].powi(*power as i32)
            }
            Observation::Indicator { value } => {
                if row[0].round() as i64 == *value as i64 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `f_n(theta)` for one observation, given the data-side coefficient moments.
    pub fn moment_polynomial(&self, obs: &Observation, data: &DataMoments) -> Result<Polynomial> {
        let p = self.num_params();
        match (&self.spec, obs) {
            (ModelSpec::GaussianSpherical { dim, .. }, Observation::Power { alpha }) => {
                check_len(alpha, *dim)?;
                gaussian_moment_poly(alpha, true)
            }
            (ModelSpec::GaussianDiagonal { dim, .. }, Observation::Power { alpha }) => {
                check_len(alpha, *dim)?;
                gaussian_moment_poly(alpha, false)
            }
            (
                ModelSpec::LinearRegression { dim, noise, .. },
                Observation::Response { alpha, power },
            ) => {
                check_len(alpha, *dim)?;
                let noise = match noise {
                    RegressionNoise::Known { variance } => NoiseTerm::Known(*variance),
                    RegressionNoise::Parameter => NoiseTerm::Variable(*dim),
                    RegressionNoise::PerComponentCoefficient { .. } => {
                        return Err(Error::Unsupported(
                            "per-component noise coefficients do not give separable moment polynomials".into(),
                        ))
                    }
                };
                mlr_moment_poly(alpha, *power, data, noise, p)
            }
            (ModelSpec::Binomial { trials }, Observation::Indicator { value }) => {
                if value > trials {
                    return Err(Error::InvalidSpec(format!(
                        "indicator {value} exceeds {trials} trials"
                    )));
                }
                Ok(binomial_moment_poly(*value, *trials))
            }
            (ModelSpec::Multiview { dim, .. }, Observation::Power { alpha }) => {
                check_len(alpha, 3 * dim)?;
                if !is_cross_view(alpha, *dim) {
                    return Err(Error::Unsupported(format!(
                        "multiview moment {alpha} repeats a view"
                    )));
                }
                Ok(Polynomial::monomial(alpha.clone(), 1.0))
            }
            _ => Err(Error::Unsupported(format!(
                "observation {obs} does not belong to model {}",
                self.name()
            ))),
        }
    }

    /// Symbolic provenance of the coefficients of `f_n`.
    pub fn coefficient_inputs(&self, obs: &Observation) -> Vec<CoefficientInput> {
        match (&self.spec, obs) {
            (
                ModelSpec::LinearRegression {
                    dim,
                    noise,
                    max_y_power,
                    ..
                },
                Observation::Response { alpha, power },
            ) => {
                let mut out: Vec<CoefficientInput> = monomials_up_to(*dim, *max_y_power)
                    .iter()
                    .filter(|b| b.degree() <= *power)
                    .map(|b| CoefficientInput::DataMoment(alpha.mul(b)))
                    .collect();
                if *power >= 2 {
                    out.push(match noise {
                        RegressionNoise::Known { .. } => CoefficientInput::KnownConstant("sigma^2"),
                        RegressionNoise::Parameter => CoefficientInput::Constant,
                        RegressionNoise::PerComponentCoefficient { .. } => {
                            CoefficientInput::ComponentSpecific("sigma_k^2")
                        }
                    });
                }
                out
            }
            _ => vec![CoefficientInput::Constant],
        }
    }

    /// Checks that every moment polynomial's coefficients are free of
    /// component-specific quantities.
    pub fn separability_check(&self) -> SeparabilityReport {
        for obs in self.observations() {
            for input in self.coefficient_inputs(&obs) {
                if let CoefficientInput::ComponentSpecific(name) = input {
                    return SeparabilityReport {
                        separable: false,
                        witness: Some((obs, format!("coefficient depends on {name}"))),
                    };
                }
            }
        }
        SeparabilityReport {
            separable: true,
            witness: None,
        }
    }

    pub fn validate_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::InvalidSpec(format!(
                "{} parameters given, {} expected",
                theta.len(),
                self.num_params()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite parameter".into()));
        }
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } | ModelSpec::GaussianDiagonal { dim, .. } => {
                if theta[*dim..].iter().any(|c| !(*c > 0.0)) {
                    return bad("variances must be positive");
                }
            }
            ModelSpec::LinearRegression { dim, noise, .. } => {
                if matches!(noise, RegressionNoise::Parameter) && !(theta[*dim] >= 0.0) {
                    return bad("noise variance must be nonnegative");
                }
            }
            ModelSpec::Binomial { .. } => {
                if !(theta[0] > 0.0 && theta[0] < 1.0) {
                    return bad("success probability must lie in (0, 1)");
                }
            }
            ModelSpec::Multiview { dim, emission } => {
                if let Emission::OneHot = emission {
                    for view in theta.chunks(*dim) {
                        let s: f64 = view.iter().sum();
                        if view.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-9 {
                            return bad("one-hot views need probability vectors");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws one data row from the component with parameters `theta`.
    /// `k` identifies the component for models with per-component nuisance inputs.
    pub fn sample_component(&self, theta: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.spec {
            ModelSpec::GaussianSpherical { dim, .. } => {
                let sd = theta[*dim].sqrt();
                (0..*dim).map(|d| theta[d] + sd * gauss(rng)).collect()
            }
            ModelSpec::GaussianDiagonal { dim, .. } => (0..*dim)
                .map(|d| theta[d] + theta[dim + d].sqrt() * gauss(rng))
                .collect(),
            ModelSpec::LinearRegression {
                dim,
                noise,
                covariates,
                ..
            } => {
                let x: Vec<f64> = (0..*dim).map(|_| covariates.sample(rng)).collect();
                let variance = match noise {
                    RegressionNoise::Known { variance } => *variance,
                    RegressionNoise::Parameter => theta[*dim],
                    RegressionNoise::PerComponentCoefficient { variances } => variances[k],
                };
                let eps: f64 = StandardNormal.sample(rng);
                let y =
                    x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + variance.sqrt() * eps;
                let mut row = x;
                row.push(y);
                row
            }
            ModelSpec::Binomial { trials } => {
                let successes = (0..*trials)
                    .filter(|_| rng.random::<f64>() < theta[0])
                    .count();
                vec![successes as f64]
            }
            ModelSpec::Multiview { dim, emission } => {
                let mut row = Vec::with_capacity(3 * dim);
                for view in theta.chunks(*dim) {
                    match emission {
                        Emission::OneHot => {
                            let u: f64 = rng.random();
                            let mut acc = 0.0;
                            let mut pick = dim - 1;
                            for (i, p) in view.iter().enumerate() {
                                acc += p;
                                if u < acc {
                                    pick = i;
                                    break;
                                }
                            }
                            row.extend((0..*dim).map(|i| if i == pick { 1.0 } else { 0.0 }));
                        }
                        Emission::Gaussian { sigma } => {
                            row.extend(view.iter().map(|m| m + sigma * gauss(rng)));
                        }
                    }
                }
                row
            }
        }
    }

    /// Exact data-side moments (regression covariates), for noiseless runs.
    pub fn exact_data_moments(&self) -> DataMoments {
        match &self.spec {
            ModelSpec::LinearRegression { covariates, .. } => self
                .required_data_moments()
                .into_iter()
                .map(|m| {
                    let v = covariates.moment(&m);
                    (m, v)
                })
                .collect(),
            _ => DataMoments::new(),
        }
    }

    /// Exact observation means `sum_k pi_k f_n(theta_k)` of a mixture.
    pub fn exact_estimates(&self, spec: &MixtureSpec) -> Result<ObservationEstimates> {
        let data_moments = self.exact_data_moments();
        let mut means = Vec::new();
        for obs in self.observations() {
            let f = self.moment_polynomial(&obs, &data_moments)?;
            let mut v = 0.0;
            for (w, theta) in spec.weights.iter().zip(&spec.components) {
                v += w * f.eval(theta)?;
            }
            means.push((obs, v));
        }
        Ok(ObservationEstimates {
            means,
            data_moments,
            std_errors: None,
        })
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_len(alpha: &Monomial, dim: usize) -> Result<()> {
    if alpha.num_vars() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: alpha.num_vars(),
        });
    }
    Ok(())
}

/// `prod_d h_{alpha_d}(xi_d, c_d)`; with `spherical` all dimensions share one `c`.
pub fn gaussian_moment_poly(alpha: &Monomial, spherical: bool) -> Result<Polynomial> {
    if alpha.degree() > MAX_GAUSSIAN_ORDER {
        return Err(Error::Unsupported(format!(
            "Gaussian moments above order {MAX_GAUSSIAN_ORDER}"
        )));
    }
    let d = alpha.num_vars();
    let p = if spherical { d + 1 } else { 2 * d };
    let mut out = Polynomial::constant(p, 1.0);
    for (i, &a) in alpha.exponents().iter().enumerate() {
        let c_var = if spherical { d } else { d + i };
        out = out.mul(&hermite_poly(a, p, i, c_var))?;
    }
    Ok(out)
}

/// How `sigma^2` appears in a regression moment polynomial.
#[derive(Clone, Copy, Debug)]
pub enum NoiseTerm {
    Known(f64),
    /// Index of the parameter holding `sigma^2`.
    Variable(usize),
}

/// `E[x^alpha (w.x + eps)^b]` as a polynomial in the weights (and possibly `sigma^2`).
///
/// Expands `E_eps[(u + eps)^b] = sum_i a_{b, b-2i} u^{b-2i} sigma^{2i}` and
/// `(w.x)^j = sum_{|beta| = j} multinom(j; beta) w^beta x^beta`, then replaces
/// each `x^(alpha + beta)` by the supplied data moment.
pub fn mlr_moment_poly(
    alpha: &Monomial,
    power: u32,
    xmoments: &DataMoments,
    noise: NoiseTerm,
    num_params: usize,
) -> Result<Polynomial> {
    if power > MAX_RESPONSE_POWER {
        return Err(Error::Unsupported(format!("response power {power}")));
    }
    let d = alpha.num_vars();
    let mut out = Polynomial::zero(num_params);
    for (u_pow, s_pow, coef) in hermite_moment_coeffs(power) {
        for beta in monomials_of_degree(d, u_pow) {
            let multinom = factorial(u_pow)
                / beta
                    .exponents()
                    .iter()
                    .map(|&e| factorial(e))
                    .product::<f64>();
            let xm_key = alpha.mul(&beta);
            let xm = *xmoments
                .get(&xm_key)
                .ok_or_else(|| Error::MissingDataMoment(xm_key.clone()))?;
            let mut e = vec![0; num_params];
            e[..d].copy_from_slice(beta.exponents());
            let mut c = coef * multinom * xm;
            match noise {
                NoiseTerm::Known(var) => c *= var.powi(s_pow as i32),
                NoiseTerm::Variable(idx) => e[idx] += s_pow,
            }
            out = out.add(&Polynomial::monomial(Monomial::new(e), c))?;
        }
    }
    Ok(out)
}

/// `C(m, i) p^i (1 - p)^(m - i)`, expanded.
pub fn binomial_moment_poly(i: u32, m: u32) -> Polynomial {
    let p = Polynomial::var(1, 0);
    let q = Polynomial::constant(1, 1.0)
        .add(&p.scale(-1.0))
        .expect("same ring");
    p.pow(i)
        .mul(&q.pow(m - i))
        .expect("same ring")
        .scale(binomial(m, i))
}

/// `xi^(1)_i xi^(2)_j xi^(3)_k` over the concatenated view variables (0-based indices).
pub fn multiview_moment_poly(dim: usize, i: usize, j: usize, k: usize) -> Polynomial {
    let mut e = vec![0; 3 * dim];
    e[i] = 1;
    e[dim + j] = 1;
    e[2 * dim + k] = 1;
    Polynomial::monomial(Monomial::new(e), 1.0)
}

fn is_cross_view(alpha: &Monomial, dim: usize) -> bool {
    alpha
        .exponents()
        .chunks(dim)
        .all(|view| view.iter().sum::<u32>() <= 1)
}

/// Every exponent using at most one coordinate from each of the three views:
/// single views, pairwise products and the triple products.
pub fn multiview_exponents(dim: usize) -> Vec<Monomial> {
    let mut out: Vec<Monomial> = monomials_up_to(3 * dim, 3)
        .iter()
        .filter(|m| !m.is_zero() && is_cross_view(m, dim))
        .cloned()
        .collect();
    out.sort();
    out
}

/// Draws `t` rows from the mixture. Returns the rows and the component labels.
pub fn sample(spec: &MixtureSpec, t: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    let adapter = ModelAdapter::new(spec.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cumulative = Vec::with_capacity(spec.k());
    let mut acc = 0.0;
    for w in &spec.weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rows = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for _ in 0..t {
        let u: f64 = rng.random::<f64>() * acc;
        let k = cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(spec.k() - 1);
        rows.push(adapter.sample_component(&spec.components[k], k, &mut rng));
        labels.push(k);
    }
    Ok((rows, labels))
}

/// Empirical means of every observation function (and the data-side moments).
pub fn estimate_observation_means(
    data: &Dataset,
    adapter: &ModelAdapter,
) -> Result<ObservationEstimates> {
    estimate_observation_means_for(data, adapter, &adapter.observations())
}

pub fn estimate_observation_means_for(
    data: &Dataset,
    adapter: &ModelAdapter,
    observations: &[Observation],
) -> Result<ObservationEstimates> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let cols = adapter.data_columns();
    if let Some(row) = data.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            expected: cols,
            got: row.len(),
        });
    }
    let t = data.len() as f64;
    let mut means = Vec::with_capacity(observations.len());
    let mut std_errors = Vec::with_capacity(observations.len());
    for obs in observations {
        let values: Vec<f64> = data.iter().map(|row| adapter.observe(obs, row)).collect();
        let mean = values.iter().sum::<f64>() / t;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        means.push((obs.clone(), mean));
        std_errors.push((var / t).sqrt());
    }
    let data_moments = adapter
        .required_data_moments()
        .into_iter()
        .map(|m| {
            let d = m.num_vars();
            let s: f64 = data.iter().map(|row| m.eval(&row[..d])).sum();
            (m, s / t)
        })
        .collect();
    Ok(ObservationEstimates {
        means,
        data_moments,
        std_errors: Some(std_errors),
    })
}
