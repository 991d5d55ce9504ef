//! Convergence classification, covariance rank detection, and per-parameter
//! error computation for fitted models.
//!
//! Classification is deliberately separate from fitting: a fit always returns
//! its raw ingredients (gradient, flags, dimensions) and the labeling against
//! a tolerance happens here, so the same stored fits can be re-classified
//! under a different tolerance without refitting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqfit::FitOutcome;
use crate::truemodel::TrueModelParams;

/// Why a fit was labeled unconverged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    /// Max absolute gradient at or above the tolerance.
    GradientTolerance,
    /// Reconstructed covariance not positive semidefinite.
    NonPsd,
    /// Non-finite objective or gradient at the returned estimate.
    DegenerateHessian,
    /// More parameters than observations.
    Unidentifiable,
    /// The optimizer stopped without reaching its own tolerance, or the fit
    /// was flagged (separation, inner-loop failure).
    OptimizerFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceStatus {
    pub converged: bool,
    pub reasons: Vec<ConvergenceReason>,
}

impl ConvergenceStatus {
    fn from_reasons(reasons: Vec<ConvergenceReason>) -> Self {
        ConvergenceStatus { converged: reasons.is_empty(), reasons }
    }
}

/// The classification ingredients, detachable from a full fit so persisted
/// simulation records can be re-labeled at any tolerance after the fact.
/// `None` stands for a non-finite value (JSON cannot carry NaN).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParts {
    pub max_grad: Option<f64>,
    pub objective: Option<f64>,
    pub psd_ok: bool,
    pub optimizer_ok: bool,
    pub n_params: usize,
    pub n_obs: usize,
}

impl ConvergenceParts {
    pub fn from_fit(fit: &FitOutcome) -> Self {
        let keep = |v: f64| if v.is_finite() { Some(v) } else { None };
        ConvergenceParts {
            max_grad: keep(fit.max_grad),
            objective: keep(fit.objective),
            psd_ok: fit.psd_ok,
            optimizer_ok: fit.optimizer_ok,
            n_params: fit.n_params,
            n_obs: fit.n_obs,
        }
    }

    /// A fit that errored before producing an outcome: nothing finite, no
    /// optimizer success. Unconverged at every tolerance.
    pub fn failed(n_obs: usize) -> Self {
        ConvergenceParts {
            max_grad: None,
            objective: None,
            psd_ok: true,
            optimizer_ok: false,
            n_params: 0,
            n_obs,
        }
    }
}

/// Labels a fit against a gradient tolerance. The boundary is inclusive:
/// `max_grad` exactly at `tol` is unconverged.
pub fn classify_frequentist_convergence(fit: &FitOutcome, tol: f64) -> ConvergenceStatus {
    classify_convergence_parts(&ConvergenceParts::from_fit(fit), tol)
}

/// Same classification from persisted ingredients.
pub fn classify_convergence_parts(parts: &ConvergenceParts, tol: f64) -> ConvergenceStatus {
    assert!(tol > 0.0, "gradient tolerance must be positive");
    let max_grad = parts.max_grad.unwrap_or(f64::NAN);
    let objective = parts.objective.unwrap_or(f64::NAN);
    let mut reasons = Vec::new();
    if !max_grad.is_finite() || !objective.is_finite() {
        reasons.push(ConvergenceReason::DegenerateHessian);
    } else if max_grad >= tol {
        reasons.push(ConvergenceReason::GradientTolerance);
    }
    if !parts.psd_ok {
        reasons.push(ConvergenceReason::NonPsd);
    }
    if parts.n_params > parts.n_obs {
        reasons.push(ConvergenceReason::Unidentifiable);
    }
    if !parts.optimizer_ok {
        reasons.push(ConvergenceReason::OptimizerFailure);
    }
    ConvergenceStatus::from_reasons(reasons)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKind {
    Full,
    Deficient,
}

/// Principal-component view of an estimated covariance factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankStatus {
    pub status: RankKind,
    /// Smallest number of principal components whose cumulative variance
    /// share reaches 1 (within 1e-9).
    pub components_needed: usize,
}

/// Rank of the covariance via PCA on its Cholesky factor: the component
/// variances are the squared singular values of the factor, and the matrix is
/// deficient when fewer than k components carry all the variance.
pub fn rank_of_covariance(chol: &DMatrix<f64>) -> RankStatus {
    assert_eq!(chol.nrows(), chol.ncols(), "covariance factor must be square");
    let k = chol.nrows();
    let mut vars: Vec<f64> = chol
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s * s)
        .collect();
    vars.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = vars.iter().sum();
    if total <= 0.0 {
        return RankStatus {
            status: if k == 0 { RankKind::Full } else { RankKind::Deficient },
            components_needed: 0,
        };
    }
    let mut cum = 0.0;
    let mut needed = k;
    for (i, v) in vars.iter().enumerate() {
        cum += v;
        if cum / total >= 1.0 - 1e-9 {
            needed = i + 1;
            break;
        }
    }
    RankStatus {
        status: if needed == k { RankKind::Full } else { RankKind::Deficient },
        components_needed: needed,
    }
}

/// Point estimates in the common parameter layout, for error computation
/// against a true model. Built from a frequentist fit or (by the simulation
/// driver) from posterior means.
#[derive(Debug, Clone)]
pub struct PointEstimates {
    pub beta: Vec<f64>,
    /// Per grouping factor: (per-effect SDs, correlation matrix).
    pub factors: Vec<(Vec<f64>, DMatrix<f64>)>,
    pub sigma_eps: Option<f64>,
}

impl PointEstimates {
    pub fn from_fit(fit: &FitOutcome) -> Self {
        PointEstimates {
            beta: fit.beta_hat.clone(),
            factors: fit
                .factors
                .iter()
                .map(|f| (f.sigma.clone(), f.omega_matrix()))
                .collect(),
            sigma_eps: fit.sigma_eps_hat,
        }
    }
}

/// Squared error per parameter for one grouping factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorErrors {
    /// Per-effect SD errors, in SD units.
    pub sigma: Vec<f64>,
    /// Strict lower triangle of the correlation matrix, row-major.
    pub omega_lower: Vec<f64>,
}

/// Squared error for every model parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterErrors {
    pub beta: Vec<f64>,
    pub factors: Vec<FactorErrors>,
    pub sigma_eps: Option<f64>,
}

impl ParameterErrors {
    /// Sum over all parameters.
    pub fn total(&self) -> f64 {
        let mut t: f64 = self.beta.iter().sum();
        for f in &self.factors {
            t += f.sigma.iter().sum::<f64>();
            t += f.omega_lower.iter().sum::<f64>();
        }
        t + self.sigma_eps.unwrap_or(0.0)
    }
}

/// Squared error per β, per random-effect SD, per strict-lower-triangle
/// correlation, and per residual SD where present.
///
/// Gaussian truths must already be expressed on the standardized-response
/// scale (the scale every fit reports on); see
/// [`TrueModelParams::to_standardized_scale`].
pub fn parameter_errors(truth: &TrueModelParams, fit: &FitOutcome) -> Result<ParameterErrors> {
    parameter_errors_of(truth, &PointEstimates::from_fit(fit))
}

pub fn parameter_errors_of(
    truth: &TrueModelParams,
    est: &PointEstimates,
) -> Result<ParameterErrors> {
    if truth.beta.len() != est.beta.len() {
        return Err(Error::StateMismatch(format!(
            "beta length differs: truth {} vs estimate {}",
            truth.beta.len(),
            est.beta.len()
        )));
    }
    if truth.factors.len() != est.factors.len() {
        return Err(Error::StateMismatch(format!(
            "grouping factor count differs: truth {} vs estimate {}",
            truth.factors.len(),
            est.factors.len()
        )));
    }
    if truth.sigma_eps.is_some() != est.sigma_eps.is_some() {
        return Err(Error::StateMismatch(
            "residual SD present on one side only".into(),
        ));
    }
    let beta = truth
        .beta
        .iter()
        .zip(&est.beta)
        .map(|(t, e)| (t - e).powi(2))
        .collect();
    let mut factors = Vec::with_capacity(truth.factors.len());
    for (tf, (es, eo)) in truth.factors.iter().zip(&est.factors) {
        let k = tf.k();
        if es.len() != k || eo.nrows() != k || eo.ncols() != k {
            return Err(Error::StateMismatch(format!(
                "factor has {k} effects in truth but {} in estimate",
                es.len()
            )));
        }
        let sigma = tf
            .sigma
            .iter()
            .zip(es)
            .map(|(t, e)| (t - e).powi(2))
            .collect();
        let mut omega_lower = Vec::with_capacity(k * (k - 1) / 2);
        let tom = tf.omega.matrix();
        for i in 0..k {
            for j in 0..i {
                omega_lower.push((tom[(i, j)] - eo[(i, j)]).powi(2));
            }
        }
        factors.push(FactorErrors { sigma, omega_lower });
    }
    let sigma_eps = match (truth.sigma_eps, est.sigma_eps) {
        (Some(t), Some(e)) => Some((t - e).powi(2)),
        _ => None,
    };
    Ok(ParameterErrors { beta, factors, sigma_eps })
}

/// Imbalance-independent descriptors of how hard a true model is to fit:
/// the smallest random-effect variance (σ² units) and the sum of squared
/// strict-lower-triangle correlations, pooled over grouping factors.
pub fn summarize_true_model(truth: &TrueModelParams) -> (f64, f64) {
    let mut min_variance = f64::INFINITY;
    let mut total_correlation = 0.0;
    for f in &truth.factors {
        for s in &f.sigma {
            min_variance = min_variance.min(s * s);
        }
        for i in 0..f.k() {
            for j in 0..i {
                total_correlation += f.omega.correlation(i, j).powi(2);
            }
        }
    }
    (min_variance, total_correlation)
}
