//! End-to-end estimation.
//!
//! Moments are estimated (or injected), turned into linear conditions on the
//! parameter moments `y`, completed, certified, and handed to extraction. This
//! module also holds the EM baseline, the relative-error metric and the
//! experiment runner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::completion::{
    complete_multiview, flat_extend, solve_linear_completion, solve_sdp_rank, CompletionResult,
    CompletionStatus, LinearConfig, MomentConstraintSystem, SdpConfig,
};
use crate::error::{Error, Result};
use crate::extraction::{
    column_space_basis, extract_monomial_vectors, extract_parameters, multiplication_matrix,
    real_eigenvalues, recover_weights, select_row_basis, select_row_basis_for,
    ExtractionDiagnostics,
};
use crate::linalg;
use crate::models::{
    estimate_observation_means, sample, Dataset, Emission, MixtureSpec, ModelAdapter, ModelSpec,
    Observation, ObservationEstimates, RegressionNoise,
};
use crate::momentmat::{
    assemble, assemble_localizing, build_moment_index, equality_constraint_family,
    flat_extension_rank, localizing_index, LinearMomentConstraint, LocalizingIndex, MomentSequence,
};
use crate::polyring::{monomials_up_to, Monomial, MonomialBasis, Polynomial};

/// Extracted variances in `(-VARIANCE_CLIP, 0)` are clipped to zero.
pub const VARIANCE_CLIP: f64 = 1e-8;
/// Largest `K` accepted by the permutation search in [`relative_error`].
pub const MAX_MATCH_K: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    #[default]
    Auto,
    Linear,
    Sdp,
    MultiviewCorner,
    MultiplicationMatrix,
}

impl std::fmt::Display for SolverPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Auto => "auto",
            Self::Linear => "linear",
            Self::Sdp => "sdp",
            Self::MultiviewCorner => "multiview-corner",
            Self::MultiplicationMatrix => "multiplication-matrix",
        };
        f.write_str(s)
    }
}

/// Extra knowledge about the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintDecl {
    /// `g(theta) = 0` at every component, imposed as `L_y(theta^beta g) = 0`
    /// for every shift `beta` that stays within degree `2r`.
    Equality { polynomial: Polynomial },
    /// `g(theta) >= 0` at every component, imposed through a localizing matrix.
    Inequality { polynomial: Polynomial },
    /// A direct linear condition `L_y(polynomial) = value` on the mixture moments.
    Moment { polynomial: Polynomial, value: f64 },
}

/// `mu_1 + ... + mu_K = total` coordinatewise, assuming equal weights `1/K`:
/// then `L_y(xi_d) = total_d / K`. Approximate when weights are unequal.
pub fn equal_weight_mean_sum(
    num_params: usize,
    mean_vars: &[usize],
    total: &[f64],
    k: usize,
) -> Vec<ConstraintDecl> {
    mean_vars
        .iter()
        .zip(total)
        .map(|(&v, &t)| ConstraintDecl::Moment {
            polynomial: Polynomial::var(num_params, v),
            value: t / k as f64,
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub k: usize,
    /// Moment-matrix degree `r`; the adapter default when absent.
    pub degree: Option<u32>,
    pub solver: SolverPath,
    pub sdp: SdpConfig,
    /// Seed of the random projections used by extraction.
    pub seed: u64,
    pub constraints: Vec<ConstraintDecl>,
    /// Let reweighting rounds trade sampled-moment fit for rank.
    pub soft_moments: bool,
    /// Impose the adapter's parameter-domain inequalities in the SDP.
    pub domain_constraints: bool,
    /// Solve in unit-scale parameters (see `ModelAdapter::parameter_normalization`).
    pub normalize: bool,
    /// Residual bound of the linear route, relative to `1 + |b|`. Absent means
    /// the least-squares solution is accepted whatever its residual, which is
    /// what sampled (slightly inconsistent) moments need.
    pub linear_residual_tol: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 1,
            degree: None,
            solver: SolverPath::Auto,
            sdp: SdpConfig::default(),
            seed: 0,
            constraints: Vec::new(),
            soft_moments: true,
            domain_constraints: true,
            normalize: true,
            linear_residual_tol: None,
        }
    }
}

/// Mixture weights and per-component parameter vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEstimate {
    pub weights: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

impl From<&MixtureSpec> for ComponentEstimate {
    fn from(s: &MixtureSpec) -> Self {
        Self {
            weights: s.weights.clone(),
            components: s.components.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub status: CompletionStatus,
    pub iterations: usize,
    pub rounds: usize,
    /// Norm of the linear-condition residuals at the completed `y`.
    pub residual_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentResidual {
    pub observation: String,
    pub observed: f64,
    pub fitted: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub k: usize,
    pub degree: u32,
    pub path: SolverPath,
    pub estimate: ComponentEstimate,
    pub certificate_rank: Option<usize>,
    pub completion: CompletionSummary,
    pub extraction: ExtractionDiagnostics,
    pub weight_residual: f64,
    /// Largest `|sum_k pi_k f_n(theta_k) - E[phi_n]|` over the observations.
    pub moment_residual_max: f64,
    pub moment_residuals: Vec<MomentResidual>,
    /// One entry per declared constraint: largest violation over its family.
    pub constraint_residuals: Vec<f64>,
    pub warnings: Vec<String>,
    /// `theta = offset + scale * theta'` between original and solver parameters.
    pub parameter_offset: Vec<f64>,
    pub parameter_scale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_error: Option<f64>,
    pub config: FitConfig,
    /// Completed moments of the solver parameters.
    #[serde(skip)]
    pub moments: Option<MomentSequence>,
    /// Wall time; kept out of the JSON so reports are reproducible.
    #[serde(skip)]
    pub elapsed: Duration,
}

struct Condition {
    observation: Observation,
    polynomial: Polynomial,
    observed: f64,
    std_error: Option<f64>,
}

/// Estimates moments from data and fits.
pub fn fit(adapter: &ModelAdapter, data: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    let est = estimate_observation_means(data, adapter)?;
    fit_moments(adapter, &est, cfg)
}

/// Fits from already estimated (or exact) observation means.
pub fn fit_moments(
    adapter: &ModelAdapter,
    est: &ObservationEstimates,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let start = Instant::now();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::InvalidSpec("K must be at least 1".into()));
    }
    cfg.sdp.validate()?;
    let p = adapter.num_params();
    let r = cfg.degree.unwrap_or_else(|| adapter.default_degree(k));
    if r == 0 {
        return Err(Error::InvalidSpec("degree r must be at least 1".into()));
    }
    let s_lower = monomials_up_to(p, r - 1).len();
    if s_lower < k {
        return Err(Error::InvalidSpec(format!(
            "degree r = {r} gives {s_lower} monomials of degree <= r - 1, fewer than K = {k}"
        )));
    }
    let mut warnings = Vec::new();

    let mut conditions = Vec::new();
    for (i, (obs, v)) in est.means.iter().enumerate() {
        let f = adapter.moment_polynomial(obs, &est.data_moments)?;
        if f.is_zero() {
            continue;
        }
        if f.degree() > 2 * r {
            warnings.push(format!(
                "observation {obs} has degree {} > 2r and was skipped",
                f.degree()
            ));
            continue;
        }
        conditions.push(Condition {
            observation: obs.clone(),
            polynomial: f,
            observed: *v,
            std_error: est.std_errors.as_ref().and_then(|se| se.get(i).copied()),
        });
    }

    if conditions.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "no observation has degree <= 2r = {}; raise the degree",
            2 * r
        )));
    }

    let (offset, scale) = if cfg.normalize {
        adapter.parameter_normalization(est)
    } else {
        (vec![0.0; p], vec![1.0; p])
    };
    let solver_poly = |f: &Polynomial| f.affine_substitute(&offset, &scale);

    let mut declared: Vec<Vec<LinearMomentConstraint>> = Vec::new();
    let mut localizing: Vec<LocalizingIndex> = Vec::new();
    for decl in &cfg.constraints {
        let g = match decl {
            ConstraintDecl::Equality { polynomial }
            | ConstraintDecl::Inequality { polynomial }
            | ConstraintDecl::Moment { polynomial, .. } => polynomial,
        };
        if g.num_vars() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: g.num_vars(),
            });
        }
        if g.degree() > 2 * r {
            return Err(Error::DegreeOverflow {
                degree: g.degree(),
                available: 2 * r,
            });
        }
        let g2 = solver_poly(g)?;
        match decl {
            ConstraintDecl::Equality { .. } => {
                declared.push(equality_constraint_family(&g2, 2 * r - g2.degree())?)
            }
            ConstraintDecl::Inequality { .. } => {
                localizing.push(localizing_index(&g2, (2 * r - g2.degree()) / 2, 2 * r)?);
                declared.push(Vec::new());
            }
            ConstraintDecl::Moment { value, .. } => {
                declared.push(vec![LinearMomentConstraint::from_polynomial(&g2, *value)?])
            }
        }
    }

    let user_inequalities = !localizing.is_empty();
    let mut sdp_localizing = localizing.clone();
    if cfg.domain_constraints {
        for g in adapter.domain_inequalities() {
            let g2 = solver_poly(&g)?;
            if g2.degree() <= 2 * r {
                sdp_localizing.push(localizing_index(&g2, (2 * r - g2.degree()) / 2, 2 * r)?);
            }
        }
    }

    // Sampled moments become soft rows with penalty
    // misfit_weight * se_min * sum (residual / se)^2 / 2, so a residual of one
    // standard error on the most precise row costs about as much as a unit of
    // trailing eigenvalue mass, whatever the sample size.
    let se_floor = conditions
        .iter()
        .filter_map(|c| c.std_error)
        .filter(|se| *se > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut sys = MomentConstraintSystem::new(p, r);
    for c in &conditions {
        let row =
            LinearMomentConstraint::from_polynomial(&solver_poly(&c.polynomial)?, c.observed)?;
        match c.std_error {
            Some(se) if cfg.soft_moments && se > 0.0 => sys.add_soft(row, se_floor.sqrt() / se)?,
            _ => sys.add(row)?,
        }
    }
    for family in &declared {
        sys.extend(family.iter().cloned())?;
    }
    let linear_cfg = LinearConfig {
        residual_tol: cfg.linear_residual_tol.unwrap_or(f64::INFINITY),
        ..LinearConfig::default()
    };

    let (path, completion, thetas_direct) = match cfg.solver {
        SolverPath::Auto => {
            if adapter.views().is_some() && cfg.constraints.is_empty() {
                (
                    SolverPath::MultiviewCorner,
                    multiview_completion(adapter, &sys, k, r)?,
                    None,
                )
            } else {
                match linear_route(&sys, k, linear_cfg, !user_inequalities) {
                    Ok(c) => (SolverPath::Linear, c, None),
                    Err(Error::Underdetermined { .. }) => (
                        SolverPath::Sdp,
                        solve_sdp_rank(&sys, &cfg.sdp, &sdp_localizing, k)?,
                        None,
                    ),
                    Err(e) => return Err(e),
                }
            }
        }
        SolverPath::Linear => (
            SolverPath::Linear,
            linear_route(&sys, k, linear_cfg, !user_inequalities)?,
            None,
        ),
        SolverPath::Sdp => (
            SolverPath::Sdp,
            solve_sdp_rank(&sys, &cfg.sdp, &sdp_localizing, k)?,
            None,
        ),
        SolverPath::MultiviewCorner => {
            if adapter.views().is_none() {
                return Err(Error::Unsupported(format!(
                    "model {} has no views",
                    adapter.name()
                )));
            }
            (
                SolverPath::MultiviewCorner,
                multiview_completion(adapter, &sys, k, r)?,
                None,
            )
        }
        SolverPath::MultiplicationMatrix => {
            let (c, thetas) = multiplication_route(&sys, k, linear_cfg)?;
            (SolverPath::MultiplicationMatrix, c, Some(thetas))
        }
    };
    if completion.status == CompletionStatus::SdpMaxIter {
        warnings.push(format!(
            "SDP stopped at the iteration limit ({} iterations over {} rounds)",
            completion.iterations, completion.rounds
        ));
    }

    let y = &completion.y;
    let (mut thetas, extraction) = match thetas_direct {
        Some(t) => (t, ExtractionDiagnostics::default()),
        None => {
            if path == SolverPath::MultiviewCorner {
                multiview_extract(adapter, y, k, cfg)?
            } else {
                let index = build_moment_index(p, r);
                let m = assemble(&index, y)?;
                let cb = column_space_basis(&m, index.basis(), k, cfg.sdp.rank_policy())?;
                let sel = select_row_basis(&cb)?;
                extract_parameters(&cb, &sel, cfg.seed)?
            }
        }
    };
    if completion.certificate != Some(k) && path != SolverPath::MultiplicationMatrix {
        warnings.push(match completion.certificate {
            Some(rank) => format!("flat certificate has rank {rank}, not K = {k}"),
            None => "no flat certificate; parameters come from the leading rank-K subspace".into(),
        });
    }

    for theta in &mut thetas {
        for (v, (o, s)) in theta.iter_mut().zip(offset.iter().zip(&scale)) {
            *v = o + s * *v;
        }
        for idx in adapter.variance_indices() {
            let c = theta[idx];
            if c < -VARIANCE_CLIP {
                return Err(Error::Extraction(format!(
                    "extracted variance {c:.3e} is negative"
                )));
            }
            if c < 0.0 {
                warnings.push(format!("variance {c:.3e} clipped to 0"));
                theta[idx] = 0.0;
            }
        }
    }

    let lower: Vec<(Monomial, f64)> = monomials_up_to(p, r)
        .iter()
        .filter_map(|m| y.get(m).ok().map(|v| (m.clone(), v)))
        .collect();
    let solver_thetas: Vec<Vec<f64>> = thetas
        .iter()
        .map(|t| {
            t.iter()
                .zip(offset.iter().zip(&scale))
                .map(|(v, (o, s))| (v - o) / s)
                .collect()
        })
        .collect();
    let (weights, weight_residual) = recover_weights(&solver_thetas, &lower)?;
    let mut estimate = ComponentEstimate {
        weights,
        components: thetas,
    };
    sort_components(&mut estimate);

    let mut moment_residuals = Vec::with_capacity(conditions.len());
    let mut moment_residual_max: f64 = 0.0;
    for c in &conditions {
        let mut fitted = 0.0;
        for (w, theta) in estimate.weights.iter().zip(&estimate.components) {
            fitted += w * c.polynomial.eval(theta)?;
        }
        moment_residual_max = moment_residual_max.max((fitted - c.observed).abs());
        moment_residuals.push(MomentResidual {
            observation: c.observation.to_string(),
            observed: c.observed,
            fitted,
        });
    }

    let mut constraint_residuals = Vec::with_capacity(cfg.constraints.len());
    let mut loc_iter = localizing.iter();
    for family in &declared {
        if family.is_empty() {
            let li = loc_iter
                .next()
                .expect("one localizing block per inequality");
            let lm = assemble_localizing(li, y)?;
            constraint_residuals.push((-linalg::min_eigenvalue(&lm)).max(0.0));
        } else {
            let mut worst: f64 = 0.0;
            for c in family {
                worst = worst.max(c.residual(y)?.abs());
            }
            constraint_residuals.push(worst);
        }
    }

    Ok(FitReport {
        model: adapter.name().to_string(),
        k,
        degree: r,
        path,
        estimate,
        certificate_rank: completion.certificate,
        completion: CompletionSummary {
            status: completion.status,
            iterations: completion.iterations,
            rounds: completion.rounds,
            residual_norm: completion.residual_norm,
        },
        extraction,
        weight_residual,
        moment_residual_max,
        moment_residuals,
        constraint_residuals,
        warnings,
        parameter_offset: offset,
        parameter_scale: scale,
        relative_error: None,
        config: cfg.clone(),
        moments: Some(completion.y.clone()),
        elapsed: start.elapsed(),
    })
}

fn sort_components(est: &mut ComponentEstimate) {
    let mut order: Vec<usize> = (0..est.components.len()).collect();
    order.sort_by(|&a, &b| {
        est.components[a]
            .iter()
            .zip(&est.components[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    est.weights = order.iter().map(|&i| est.weights[i]).collect();
    est.components = order.iter().map(|&i| est.components[i].clone()).collect();
}

/// Linear solve over `|alpha| <= 2r`; when that is underdetermined but the
/// conditions pin `|alpha| <= 2r - 1`, the top degree is filled by a flat extension.
fn linear_route(
    sys: &MomentConstraintSystem,
    k: usize,
    cfg: LinearConfig,
    allow_flat_extension: bool,
) -> Result<CompletionResult> {
    let r = sys.degree();
    match solve_linear_completion(sys, cfg) {
        Err(Error::Underdetermined { rank, unknowns }) => {
            let fits_lower = sys.constraints().iter().all(|c| c.max_degree() < 2 * r);
            if !allow_flat_extension || !fits_lower {
                return Err(Error::Underdetermined { rank, unknowns });
            }
            let lower = sys.restricted(
                monomials_up_to(sys.num_vars(), 2 * r - 1)
                    .monomials()
                    .to_vec(),
            )?;
            let partial = solve_linear_completion(&lower, cfg)?;
            let y = flat_extend(&partial.y, r, k)?;
            let certificate = flat_extension_rank(&y, r, Default::default())?;
            Ok(CompletionResult {
                residual_norm: sys.residual_norm(&y)?,
                y,
                certificate,
                ..partial
            })
        }
        other => other,
    }
}

/// Univariate monomial problem: Hankel moments `y_0..y_{2K-1}` give the
/// multiplication matrix whose eigenvalues are the atoms.
fn multiplication_route(
    sys: &MomentConstraintSystem,
    k: usize,
    cfg: LinearConfig,
) -> Result<(CompletionResult, Vec<Vec<f64>>)> {
    if sys.num_vars() != 1 {
        return Err(Error::Unsupported(
            "the multiplication-matrix path handles one parameter per component".into(),
        ));
    }
    if sys.degree() * 2 + 1 < 2 * k as u32 {
        return Err(Error::InvalidSpec(format!("degree r must be at least {k}")));
    }
    let solved = linear_route(sys, k, cfg, true)?;
    let y = |i: usize| solved.y.get(&Monomial::new(vec![i as u32]));
    let mut theta_hat = DMatrix::zeros(k, k);
    let mut phi_hat = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            theta_hat[(i, j)] = y(i + j)?;
            phi_hat[(i, j)] = y(i + j + 1)?;
        }
    }
    let c = multiplication_matrix(&theta_hat, &phi_hat)?;
    let atoms = real_eigenvalues(&c)?;
    Ok((solved, atoms.into_iter().map(|a| vec![a]).collect()))
}

fn multiview_completion(
    adapter: &ModelAdapter,
    sys: &MomentConstraintSystem,
    k: usize,
    r: u32,
) -> Result<CompletionResult> {
    let views = adapter.views().expect("multiview adapter");
    let p = adapter.num_params();
    let mut observed = MomentSequence::new(p, Default::default())?;
    for c in sys.constraints() {
        if c.coefficients().len() != 1 {
            return Err(Error::Unsupported(
                "multiview conditions must each pin one moment".into(),
            ));
        }
        let (m, coef) = c.coefficients().iter().next().expect("one term");
        observed.insert(m.clone(), c.rhs() / coef);
    }
    // Extraction reads only moments of degree <= 2r - 1; the top degree is
    // completed (when the pivots allow) for the flat certificate alone.
    let partial = complete_multiview(&observed, &views, k, 2 * r - 1)?;
    let (y, certificate) = match complete_multiview(&partial, &views, k, 2 * r) {
        Ok(full) => {
            let cert = flat_extension_rank(&full, r, Default::default())?;
            (full, cert)
        }
        Err(_) => (partial, None),
    };
    Ok(CompletionResult {
        residual_norm: sys.residual_norm(&y)?,
        y,
        status: CompletionStatus::Corner,
        certificate,
        iterations: 0,
        rounds: 0,
    })
}

/// Extraction from the cross-view block of `M_2(y)`, which needs no completed
/// entry.
///
/// Rows are `1`, the view-1 and view-2 variables and their cross products;
/// columns are `1` and the variables of views 3 onward. Shifts by view-2
/// variables drive the eigenproblem, the recovered row vectors give views 1
/// and 2, and regressing each column on them gives the weights and the
/// remaining views.
fn multiview_extract(
    adapter: &ModelAdapter,
    y: &MomentSequence,
    k: usize,
    cfg: &FitConfig,
) -> Result<(Vec<Vec<f64>>, ExtractionDiagnostics)> {
    let views = adapter.views().expect("multiview adapter");
    let p: usize = views.iter().sum();
    let (d1, d2) = (views[0], views[1]);
    let unit = |v: usize| Monomial::unit(p, v);
    let mut rows = vec![Monomial::zero(p)];
    rows.extend((0..d1 + d2).map(unit));
    for i in 0..d1 {
        for j in 0..d2 {
            rows.push(unit(i).mul(&unit(d1 + j)));
        }
    }
    let mut cols = vec![Monomial::zero(p)];
    cols.extend((d1 + d2..p).map(unit));
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            m[(i, j)] = y.get(&a.mul(b))?;
        }
    }
    let basis = MonomialBasis::from_monomials(p, rows)?;
    let cb = column_space_basis(&m, &basis, k, cfg.sdp.rank_policy())?;
    let shift_vars: Vec<usize> = (d1..d1 + d2).collect();
    let sel = select_row_basis_for(&cb, &shift_vars)?;
    let (v, diag) = extract_monomial_vectors(&cb, &sel, cfg.seed)?;
    // m = V diag(pi) W^T, where W holds each column monomial at each atom.
    let g = v
        .clone()
        .svd(true, true)
        .solve(&m, 1e-12 * v.norm())
        .map_err(|e| Error::Extraction(e.into()))?;
    let mut thetas = vec![vec![0.0; p]; k];
    for (c, theta) in thetas.iter_mut().enumerate() {
        let pi = g[(c, 0)];
        if !(pi.abs() > 1e-12) {
            return Err(Error::Extraction(format!(
                "component {c} has vanishing weight {pi:.3e}"
            )));
        }
        for var in 0..d1 + d2 {
            theta[var] = v[(basis.position(&unit(var)).expect("row label"), c)];
        }
        for (j, var) in (d1 + d2..p).enumerate() {
            theta[var] = g[(c, j + 1)] / pi;
        }
    }
    Ok((thetas, diag))
}

/// `max_k |theta_k - theta*_k| / |theta*_k|`, minimized over matchings.
pub fn relative_error(est: &ComponentEstimate, truth: &MixtureSpec) -> Result<f64> {
    let k = truth.components.len();
    if est.components.len() != k {
        return Err(Error::ComponentMismatch {
            estimate: est.components.len(),
            truth: k,
        });
    }
    if k > MAX_MATCH_K {
        return Err(Error::Unsupported(format!(
            "matching supports K <= {MAX_MATCH_K}"
        )));
    }
    for (a, b) in est.components.iter().zip(&truth.components) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len(),
                got: a.len(),
            });
        }
    }
    let cost: Vec<Vec<f64>> = truth
        .components
        .iter()
        .map(|t| {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            est.components
                .iter()
                .map(|e| {
                    let d = e
                        .iter()
                        .zip(t)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    d / norm
                })
                .collect()
        })
        .collect();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let v = p
            .iter()
            .enumerate()
            .map(|(t, &e)| cost[t][e])
            .fold(0.0, f64::max);
        best = best.min(v);
    });
    Ok(best)
}

fn permute(p: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == p.len() {
        visit(p);
        return;
    }
    for i in at..p.len() {
        p.swap(at, i);
        permute(p, at + 1, visit);
        p.swap(at, i);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Diagonal,
    Spherical,
}

/// Result of the EM baseline.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub estimate: ComponentEstimate,
    pub log_likelihood: f64,
    /// Average log-likelihood after every iteration of the winning restart.
    pub trace: Vec<f64>,
}

const EM_MAX_ITER: usize = 500;
const EM_TOL: f64 = 1e-8;
const KMEANS_ITER: usize = 100;

/// Diagonal or spherical Gaussian EM initialized by k-means++, best of
/// `restarts` runs by log-likelihood. Parameters use the Gaussian adapter layout.
pub fn em_gaussian_baseline(
    data: &Dataset,
    k: usize,
    seed: u64,
    restarts: usize,
    kind: CovarianceKind,
) -> Result<EmFit> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidSpec("K and restarts must be positive".into()));
    }
    let d = data[0].len();
    if let Some(row) = data.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<EmFit> = None;
    for _ in 0..restarts {
        let run = em_run(data, k, kind, &mut rng);
        if best
            .as_ref()
            .is_none_or(|b| run.log_likelihood > b.log_likelihood)
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn global_variance(data: &Dataset) -> Vec<f64> {
    let n = data.len() as f64;
    let d = data[0].len();
    (0..d)
        .map(|j| {
            let mean = data.iter().map(|r| r[j]).sum::<f64>() / n;
            data.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

fn kmeans_pp(data: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut nearest: Vec<f64> = data.iter().map(|x| dist2(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|w| {
                    acc += w;
                    acc > u
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[next].clone());
        for (n, x) in nearest.iter_mut().zip(data) {
            *n = n.min(dist2(x, centers.last().expect("nonempty")));
        }
    }
    for _ in 0..KMEANS_ITER {
        let mut sums = vec![vec![0.0; data[0].len()]; k];
        let mut counts = vec![0usize; k];
        for x in data {
            let j = (0..k)
                .min_by(|&a, &b| dist2(x, &centers[a]).total_cmp(&dist2(x, &centers[b])))
                .expect("k >= 1");
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            if c != centers[j] {
                moved = true;
                centers[j] = c;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

fn em_run(data: &Dataset, k: usize, kind: CovarianceKind, rng: &mut ChaCha8Rng) -> EmFit {
    let n = data.len();
    let d = data[0].len();
    let gvar = global_variance(data);
    let floor: Vec<f64> = gvar.iter().map(|v| (v * 1e-9).max(1e-300)).collect();
    let mut means = kmeans_pp(data, k, rng);
    let mut vars = vec![gvar.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];
    if kind == CovarianceKind::Spherical {
        let s = gvar.iter().sum::<f64>() / d as f64;
        vars = vec![vec![s; d]; k];
    }
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for _ in 0..EM_MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (t, x) in data.iter().enumerate() {
            let row = &mut resp[t * k..(t + 1) * k];
            for j in 0..k {
                let mut lp = weights[j].ln();
                for q in 0..d {
                    let v = vars[j][q];
                    lp -= 0.5 * (ln2pi + v.ln() + (x[q] - means[j][q]).powi(2) / v);
                }
                row[j] = lp;
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            ll += lse;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let avg = ll / n as f64;
        let done = trace
            .last()
            .is_some_and(|prev: &f64| (avg - prev).abs() <= EM_TOL * (1.0 + prev.abs()));
        trace.push(avg);
        if done {
            break;
        }
        // M-step
        for j in 0..k {
            let nk: f64 = (0..n).map(|t| resp[t * k + j]).sum();
            if nk < 1e-10 {
                // Empty component: reseed at a random point with the global spread.
                means[j] = data[rng.random_range(0..n)].clone();
                vars[j] = gvar.clone();
                weights[j] = 1.0 / n as f64;
                continue;
            }
            let mut mu = vec![0.0; d];
            for (t, x) in data.iter().enumerate() {
                let r = resp[t * k + j];
                for q in 0..d {
                    mu[q] += r * x[q];
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for (t, x) in data.iter().enumerate() {
                let r = resp[t * k + j];
                for q in 0..d {
                    var[q] += r * (x[q] - mu[q]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= nk);
            if kind == CovarianceKind::Spherical {
                let s = var.iter().sum::<f64>() / d as f64;
                var = vec![s; d];
            }
            for (v, f) in var.iter_mut().zip(&floor) {
                *v = v.max(*f);
            }
            means[j] = mu;
            vars[j] = var;
            weights[j] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    let components = (0..k)
        .map(|j| {
            let mut theta = means[j].clone();
            match kind {
                CovarianceKind::Diagonal => theta.extend(&vars[j]),
                CovarianceKind::Spherical => theta.push(vars[j][0]),
            }
            theta
        })
        .collect();
    let mut estimate = ComponentEstimate {
        weights,
        components,
    };
    sort_components(&mut estimate);
    EmFit {
        estimate,
        log_likelihood: *trace.last().expect("at least one iteration"),
        trace,
    }
}

/// Estimation methods compared by experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Poly,
    Em,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Poly => "poly",
            Self::Em => "em",
        })
    }
}

/// Random-model families used by experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentModel {
    GaussianSpherical,
    #[serde(rename = "gaussian-diag")]
    GaussianDiagonal,
    /// Diagonal Gaussians with `mu_1 + mu_2 = 1`, equal weights.
    GaussianConstrained,
    /// Three-view mixture with one-hot (multinomial) views.
    Multiview,
    LinearRegression,
    Binomial,
}

/// Noise variance of the random regression models.
pub const EXPERIMENT_REGRESSION_NOISE: f64 = 0.1;
/// Mass on the component's own category in random multiview models.
pub const MULTIVIEW_PEAK: f64 = 0.5;
/// Trials per component in random binomial models.
pub const EXPERIMENT_BINOMIAL_TRIALS: u32 = 10;

/// Draws a random mixture from a documented family.
///
/// * Gaussians: means `N(0, I)`; every component standard deviation (each
///   coordinate for diagonal models) is `2 |mu_1 - mu_2| * U(0.8, 1.2)`.
/// * Constrained Gaussians: `mu_2 = 1 - mu_1`, equal weights.
/// * Multiview: each view mean of component `k` puts mass 0.5 on category
///   `k mod D` and spreads the rest as a flat-Dirichlet probability vector.
/// * Regression: weights `N(0, I)`, covariates `N(0, I)`, noise variance 0.1.
/// * Binomial: 10 trials, success probabilities `U(0.1, 0.9)` at least 0.15 apart.
///
/// Weights are proportional to `U(0.5, 1.5)` unless stated otherwise.
pub fn random_mixture(
    model: ExperimentModel,
    k: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureSpec> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidSpec("K and D must be positive".into()));
    }
    let mut normal =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let mut means: Vec<Vec<f64>> = (0..k).map(|_| normal(d)).collect();
    if model == ExperimentModel::GaussianConstrained {
        if k != 2 {
            return Err(Error::InvalidSpec(
                "the constrained model has two components".into(),
            ));
        }
        means[1] = means[0].iter().map(|m| 1.0 - m).collect();
    }
    let spread = if k >= 2 {
        means[0]
            .iter()
            .zip(&means[1])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    } else {
        1.0
    };
    let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    if model == ExperimentModel::GaussianConstrained {
        weights = vec![1.0; k];
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let sd = |rng: &mut ChaCha8Rng| 2.0 * spread * rng.random_range(0.8..1.2);

    let (spec_model, components): (ModelSpec, Vec<Vec<f64>>) = match model {
        ExperimentModel::GaussianSpherical => (
            ModelSpec::GaussianSpherical {
                dim: d,
                max_order: None,
            },
            means
                .into_iter()
                .map(|mut m| {
                    m.push(sd(rng).powi(2));
                    m
                })
                .collect(),
        ),
        ExperimentModel::GaussianDiagonal | ExperimentModel::GaussianConstrained => (
            ModelSpec::GaussianDiagonal {
                dim: d,
                max_order: None,
            },
            means
                .into_iter()
                .map(|mut m| {
                    for _ in 0..d {
                        let s = sd(rng);
                        m.push(s * s);
                    }
                    m
                })
                .collect(),
        ),
        ExperimentModel::Multiview => (
            ModelSpec::Multiview {
                dim: d,
                emission: Emission::OneHot,
            },
            (0..k)
                .map(|c| {
                    (0..3)
                        .flat_map(|_| {
                            let e: Vec<f64> = (0..d)
                                .map(|_| -rng.random::<f64>().max(1e-300).ln())
                                .collect();
                            let s: f64 = e.iter().sum();
                            e.into_iter().enumerate().map(move |(i, v)| {
                                let peak = if i == c % d { MULTIVIEW_PEAK } else { 0.0 };
                                peak + (1.0 - MULTIVIEW_PEAK) * v / s
                            })
                        })
                        .collect()
                })
                .collect(),
        ),
        ExperimentModel::LinearRegression => (
            ModelSpec::LinearRegression {
                dim: d,
                noise: RegressionNoise::Known {
                    variance: EXPERIMENT_REGRESSION_NOISE,
                },
                max_x_degree: 3,
                max_y_power: 3,
                covariates: Default::default(),
            },
            means,
        ),
        ExperimentModel::Binomial => {
            let mut ps: Vec<f64> = Vec::new();
            while ps.len() < k {
                let p = rng.random_range(0.1..0.9);
                if ps.iter().all(|q: &f64| (q - p).abs() >= 0.15) {
                    ps.push(p);
                }
                if ps.is_empty() && k > 5 {
                    return Err(Error::InvalidSpec("too many binomial components".into()));
                }
            }
            (
                ModelSpec::Binomial {
                    trials: EXPERIMENT_BINOMIAL_TRIALS,
                },
                ps.into_iter().map(|p| vec![p]).collect(),
            )
        }
    };
    let spec = MixtureSpec {
        model: spec_model,
        weights,
        components,
    };
    spec.validate()?;
    Ok(spec)
}

/// Table-style experiment: random models of one family, fitted at several
/// sample sizes by each method.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub model: Option<ExperimentModel>,
    pub k: usize,
    pub d: usize,
    /// Sample sizes `T`.
    pub samples: Vec<usize>,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub degree: Option<u32>,
    pub solver: Option<SolverPath>,
    pub sdp: Option<SdpConfig>,
    /// Worker threads; the available parallelism when absent.
    pub threads: Option<usize>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<ExperimentModel> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        let Some(model) = self.model else {
            return bad("experiment needs a model");
        };
        if self.k == 0 || self.d == 0 {
            return bad("k and d must be positive");
        }
        if self.k > MAX_MATCH_K {
            return bad("k must be at most 6");
        }
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if self.samples.is_empty() || self.samples.contains(&0) {
            return bad("samples must list positive sample sizes");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        let gaussian = matches!(
            model,
            ExperimentModel::GaussianSpherical
                | ExperimentModel::GaussianDiagonal
                | ExperimentModel::GaussianConstrained
        );
        if self.methods.contains(&Method::Em) && !gaussian {
            return bad("the em method supports Gaussian models only");
        }
        if let Some(sdp) = &self.sdp {
            sdp.validate()?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub samples: usize,
    pub method: Method,
    pub error: Option<f64>,
    pub certificate_rank: Option<usize>,
    pub failure: Option<String>,
}

/// One row of an experiment table (a model/method pair at one sample size).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub model: ExperimentModel,
    pub k: usize,
    pub d: usize,
    pub samples: usize,
    pub method: Method,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<ExperimentRow>,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>2} {:>2} {:>8} {:<6} {:>10} {:>10} {:>8}\n",
            "model", "K", "D", "T", "method", "mean", "median", "failed"
        );
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            let model = serde_json::to_value(r.model)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:<20} {:>2} {:>2} {:>8} {:<6} {:>10} {:>10} {:>8}\n",
                model,
                r.k,
                r.d,
                r.samples,
                r.method.to_string(),
                fmt(r.mean_error),
                fmt(r.median_error),
                r.failures
            ));
        }
        out
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(base) ^ a) ^ b.wrapping_mul(0x9E37_79B9))
}

/// FitConfig used by the poly method of an experiment.
pub fn experiment_fit_config(
    spec: &ExperimentSpec,
    model: ExperimentModel,
    seed: u64,
) -> FitConfig {
    let mut cfg = FitConfig {
        k: spec.k,
        degree: spec.degree,
        solver: spec.solver.unwrap_or_default(),
        sdp: spec.sdp.clone().unwrap_or_default(),
        seed,
        ..FitConfig::default()
    };
    if model == ExperimentModel::GaussianConstrained {
        let p = 2 * spec.d;
        let mean_vars: Vec<usize> = (0..spec.d).collect();
        cfg.constraints = equal_weight_mean_sum(p, &mean_vars, &vec![1.0; spec.d], spec.k);
    }
    cfg
}

fn run_trial(
    spec: &ExperimentSpec,
    model: ExperimentModel,
    trial: usize,
    samples: usize,
) -> Vec<TrialRecord> {
    let failure = |method: Method, e: String| TrialRecord {
        trial,
        samples,
        method,
        error: None,
        certificate_rank: None,
        failure: Some(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, trial as u64, 0));
    let truth = match random_mixture(model, spec.k, spec.d, &mut rng) {
        Ok(t) => t,
        Err(e) => {
            return spec
                .methods
                .iter()
                .map(|&m| failure(m, e.to_string()))
                .collect()
        }
    };
    let data_seed = derive_seed(spec.seed, trial as u64, samples as u64);
    let data = match sample(&truth, samples, data_seed) {
        Ok((rows, _)) => rows,
        Err(e) => {
            return spec
                .methods
                .iter()
                .map(|&m| failure(m, e.to_string()))
                .collect()
        }
    };
    spec.methods
        .iter()
        .map(|&method| {
            let outcome = match method {
                Method::Poly => ModelAdapter::new(truth.model.clone()).and_then(|adapter| {
                    let cfg = experiment_fit_config(spec, model, data_seed);
                    let report = fit(&adapter, &data, &cfg)?;
                    Ok((
                        relative_error(&report.estimate, &truth)?,
                        report.certificate_rank,
                    ))
                }),
                Method::Em => {
                    let kind = match truth.model {
                        ModelSpec::GaussianSpherical { .. } => CovarianceKind::Spherical,
                        _ => CovarianceKind::Diagonal,
                    };
                    em_gaussian_baseline(&data, spec.k, data_seed, 5, kind)
                        .and_then(|em| Ok((relative_error(&em.estimate, &truth)?, None)))
                }
            };
            match outcome {
                Ok((err, cert)) if err.is_finite() => TrialRecord {
                    trial,
                    samples,
                    method,
                    error: Some(err),
                    certificate_rank: cert,
                    failure: None,
                },
                Ok(_) => failure(method, "non-finite error".into()),
                Err(e) => failure(method, e.to_string()),
            }
        })
        .collect()
}

/// Runs every (trial, sample size) pair, possibly on several threads, and
/// aggregates per-method errors. Failed fits are counted, not fatal.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let model = spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.trials)
        .flat_map(|t| spec.samples.iter().map(move |&s| (t, s)))
        .collect();
    let threads = spec
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len());
    let results: Vec<Mutex<Vec<TrialRecord>>> =
        jobs.iter().map(|_| Mutex::new(Vec::new())).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(trial, samples)) = jobs.get(i) else {
                    break;
                };
                *results[i].lock().expect("no poisoning") = run_trial(spec, model, trial, samples);
            });
        }
    });
    let trials: Vec<TrialRecord> = results
        .into_iter()
        .flat_map(|m| m.into_inner().expect("no poisoning"))
        .collect();

    let mut rows = Vec::new();
    for &samples in &spec.samples {
        for &method in &spec.methods {
            let mut errors: Vec<f64> = trials
                .iter()
                .filter(|r| r.samples == samples && r.method == method)
                .filter_map(|r| r.error)
                .collect();
            let failures = trials
                .iter()
                .filter(|r| r.samples == samples && r.method == method && r.error.is_none())
                .count();
            errors.sort_by(f64::total_cmp);
            let n = errors.len();
            rows.push(ExperimentRow {
                model,
                k: spec.k,
                d: spec.d,
                samples,
                method,
                mean_error: (n > 0).then(|| errors.iter().sum::<f64>() / n as f64),
                median_error: (n > 0).then(|| {
                    if n % 2 == 1 {
                        errors[n / 2]
                    } else {
                        0.5 * (errors[n / 2 - 1] + errors[n / 2])
                    }
                }),
                successes: n,
                failures,
            });
        }
    }
    Ok(ExperimentReport {
        spec: spec.clone(),
        rows,
        trials,
    })
}
