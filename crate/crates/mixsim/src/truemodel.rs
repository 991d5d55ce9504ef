//! Ground-truth parameter sampling and response generation for both
//! design regimes and both response families.
//!
//! A `TrueModelParams` holds the population-level truth (fixed effects,
//! per-factor random-effect SDs and correlations, residual SD); a
//! `TrueModel` additionally holds the realized random-effect coefficients
//! γ for one dataset. Responses follow y = Xβ + Zγ + ε for the Gaussian
//! family and y ~ Bernoulli(logit⁻¹(Xβ + Zγ)) for the logistic family.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{ItemManipulation, ModelMatrices, ZMatrix};
use crate::error::{Error, Result};
use crate::stochastic::{sample_lkj_cholesky, sample_mvnormal, CholeskyCorrelation, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Logistic,
}

/// One grouping factor's true random-effect distribution.
#[derive(Debug, Clone)]
pub struct TrueFactor {
    /// Per-effect standard deviations (length k).
    pub sigma: Vec<f64>,
    /// Correlation structure as a Cholesky factor (k×k).
    pub omega: CholeskyCorrelation,
}

impl TrueFactor {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Cholesky-style factor of Σ = diag(σ)·Ω·diag(σ): diag(σ)·L_Ω.
    pub fn covariance_cholesky(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut l = self.omega.factor().clone();
        for i in 0..k {
            for j in 0..=i {
                l[(i, j)] *= self.sigma[i];
            }
        }
        l
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.covariance_cholesky();
        &l * l.transpose()
    }
}

/// Population-level ground truth shared by every observation.
#[derive(Debug, Clone)]
pub struct TrueModelParams {
    pub family: Family,
    pub beta: DVector<f64>,
    /// One entry per grouping factor, in the order of the random-effects
    /// structure (subject first).
    pub factors: Vec<TrueFactor>,
    /// Residual standard deviation; Gaussian family only.
    pub sigma_eps: Option<f64>,
}

impl TrueModelParams {
    /// Re-expresses Gaussian truth on the standardized-response scale
    /// y' = (y − mean)/sd: the intercept shifts and every scale
    /// parameter divides by sd; correlations are unchanged.
    pub fn to_standardized_scale(&self, y_mean: f64, y_sd: f64) -> Result<TrueModelParams> {
        if !(y_sd > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "standardization needs a positive response SD, got {y_sd}"
            )));
        }
        let mut beta = self.beta.clone();
        beta[0] = (beta[0] - y_mean) / y_sd;
        for j in 1..beta.len() {
            beta[j] /= y_sd;
        }
        let factors = self
            .factors
            .iter()
            .map(|f| TrueFactor {
                sigma: f.sigma.iter().map(|s| s / y_sd).collect(),
                omega: f.omega.clone(),
            })
            .collect();
        Ok(TrueModelParams {
            family: self.family,
            beta,
            factors,
            sigma_eps: self.sigma_eps.map(|s| s / y_sd),
        })
    }
}

/// Ground truth plus the realized random-effect coefficients for one
/// dataset.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub params: TrueModelParams,
    /// Realized γ, laid out to match the Z columns (group-major).
    pub gamma: DVector<f64>,
}

/// Draws true parameters for the simple crossed design.
///
/// Linear family: intercept/slope SDs are sqrt(Uniform(0,3)) (so the
/// variances are Uniform(0,3), matching the residual variance), and
/// correlations are Uniform(−0.8, 0.8). Logistic family: intercept SDs
/// Uniform(0,1), subject slope SD Uniform(0, 0.75), item slope SD
/// Uniform(0, 0.5), correlations Uniform(−0.9, 0.9). In both families
/// β₀ ~ Uniform(−3,3) and β₁ is 0 under the null, 0.8 otherwise.
pub fn sample_true_simple(
    family: Family,
    h0_true: bool,
    item_manipulation: ItemManipulation,
    rng: &mut RngStream,
) -> TrueModelParams {
    let beta0 = rng.uniform_range(-3.0, 3.0);
    let beta1 = if h0_true { 0.0 } else { 0.8 };

    let mut two_effect_factor = |slope_max: f64| -> TrueFactor {
        let (sd_int, sd_slope, rho) = match family {
            Family::Gaussian => (
                rng.uniform_range(0.0, 3.0).sqrt(),
                rng.uniform_range(0.0, 3.0).sqrt(),
                rng.uniform_range(-0.8, 0.8),
            ),
            Family::Logistic => (
                rng.uniform_range(0.0, 1.0),
                rng.uniform_range(0.0, slope_max),
                rng.uniform_range(-0.9, 0.9),
            ),
        };
        TrueFactor {
            sigma: vec![sd_int, sd_slope],
            omega: CholeskyCorrelation::from_rho(rho).expect("rho bounded away from ±1"),
        }
    };

    let subject = two_effect_factor(0.75);
    let item = match item_manipulation {
        ItemManipulation::WithinItem => two_effect_factor(0.5),
        ItemManipulation::BetweenItem => {
            let sd_int = match family {
                Family::Gaussian => rng.uniform_range(0.0, 3.0).sqrt(),
                Family::Logistic => rng.uniform_range(0.0, 1.0),
            };
            TrueFactor { sigma: vec![sd_int], omega: CholeskyCorrelation::identity(1) }
        }
    };

    let sigma_eps = match family {
        Family::Gaussian => Some(rng.uniform_range(0.0, 3.0).sqrt()),
        Family::Logistic => None,
    };

    TrueModelParams {
        family,
        beta: DVector::from_vec(vec![beta0, beta1]),
        factors: vec![subject, item],
        sigma_eps,
    }
}

/// Draws true parameters for the complex design: β₀ ~ U(−2,2), slopes
/// U(−1,1); intercept SD U(0,1), slope SDs U(0,0.5); Ω ~ LKJ(1); for the
/// Gaussian family σ_ε ~ U(0,1).
pub fn sample_true_complex(family: Family, rng: &mut RngStream) -> TrueModelParams {
    let beta = DVector::from_vec(vec![
        rng.uniform_range(-2.0, 2.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
    ]);
    let sigma = vec![
        rng.uniform_range(0.0, 1.0),
        rng.uniform_range(0.0, 0.5),
        rng.uniform_range(0.0, 0.5),
        rng.uniform_range(0.0, 0.5),
    ];
    let omega = sample_lkj_cholesky(4, 1.0, rng).expect("fixed valid LKJ parameters");
    let sigma_eps = match family {
        Family::Gaussian => Some(rng.uniform_range(0.0, 1.0)),
        Family::Logistic => None,
    };
    TrueModelParams { family, beta, factors: vec![TrueFactor { sigma, omega }], sigma_eps }
}

/// Realizes γ ~ MN(0, blockdiag(Σ)) for the given random-effects layout.
pub fn sample_gamma(params: &TrueModelParams, z: &ZMatrix, rng: &mut RngStream) -> Result<TrueModel> {
    if params.factors.len() != z.factors.len() {
        return Err(Error::InvalidParameter(format!(
            "true model has {} grouping factors but Z has {}",
            params.factors.len(),
            z.factors.len()
        )));
    }
    let mut gamma = DVector::zeros(z.q);
    for (tf, zf) in params.factors.iter().zip(&z.factors) {
        if tf.k() != zf.k {
            return Err(Error::InvalidParameter(format!(
                "factor effect count mismatch: truth has k={}, Z block has k={}",
                tf.k(),
                zf.k
            )));
        }
        let scale = tf.covariance_cholesky();
        let zero = DVector::zeros(tf.k());
        for g in 0..zf.n_groups {
            let draw = sample_mvnormal(&zero, &scale, rng)?;
            for j in 0..zf.k {
                gamma[zf.col(g, j)] = draw[j];
            }
        }
    }
    Ok(TrueModel { params: params.clone(), gamma })
}

/// The true linear predictor η = Xβ + Zγ.
pub fn linear_predictor(matrices: &ModelMatrices, model: &TrueModel) -> Result<DVector<f64>> {
    if matrices.x.ncols() != model.params.beta.len() {
        return Err(Error::InvalidParameter(format!(
            "X has {} columns but beta has {} entries",
            matrices.x.ncols(),
            model.params.beta.len()
        )));
    }
    if matrices.z.q != model.gamma.len() {
        return Err(Error::InvalidParameter(format!(
            "Z has {} columns but gamma has {} entries",
            matrices.z.q,
            model.gamma.len()
        )));
    }
    Ok(&matrices.x * &model.params.beta + matrices.z.mul_gamma(&model.gamma))
}

/// Bernoulli success probability at a linear-predictor value.
pub fn bernoulli_prob(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Generates a response vector from the true model.
pub fn generate_response(
    matrices: &ModelMatrices,
    model: &TrueModel,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    let eta = linear_predictor(matrices, model)?;
    match model.params.family {
        Family::Gaussian => {
            let sigma_eps = model.params.sigma_eps.ok_or_else(|| {
                Error::InvalidParameter("gaussian generation needs sigma_eps".into())
            })?;
            Ok(DVector::from_fn(eta.len(), |i, _| eta[i] + sigma_eps * rng.standard_normal()))
        }
        Family::Logistic => Ok(DVector::from_fn(eta.len(), |i, _| {
            if rng.uniform() < bernoulli_prob(eta[i]) {
                1.0
            } else {
                0.0
            }
        })),
    }
}

/// Fraction of linear-predictor entries strictly outside [−5, 5].
pub fn extreme_fraction(eta: &[f64]) -> Result<f64> {
    if eta.is_empty() {
        return Err(Error::InvalidParameter("extreme fraction needs a non-empty predictor".into()));
    }
    let count = eta.iter().filter(|&&e| e.abs() > 5.0).count();
    Ok(count as f64 / eta.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        gen_complex_design, gen_simple_design, model_matrices, RandomEffectsSpec, SimpleDesignConfig,
    };
    use crate::testutil::ks_against;

    fn stream(id: u64) -> RngStream {
        RngStream::new(0x7A0E, id)
    }

    #[test]
    fn null_hypothesis_controls_slope() {
        let mut r = stream(1);
        let m = sample_true_simple(Family::Gaussian, true, ItemManipulation::WithinItem, &mut r);
        assert_eq!(m.beta[1], 0.0);
        let m = sample_true_simple(Family::Gaussian, false, ItemManipulation::WithinItem, &mut r);
        assert_eq!(m.beta[1], 0.8);
    }

    #[test]
    fn simple_logistic_slope_sd_bounds() {
        let mut r = stream(2);
        for _ in 0..100_000 {
            let m = sample_true_simple(Family::Logistic, true, ItemManipulation::WithinItem, &mut r);
            assert!(m.factors[0].sigma[1] <= 0.75, "subject slope SD bound");
            assert!(m.factors[1].sigma[1] <= 0.5, "item slope SD bound");
            assert!(m.factors[0].sigma[0] <= 1.0 && m.factors[1].sigma[0] <= 1.0);
        }
    }

    #[test]
    fn simple_between_item_has_intercept_only_item_factor() {
        let mut r = stream(3);
        let m = sample_true_simple(Family::Gaussian, true, ItemManipulation::BetweenItem, &mut r);
        assert_eq!(m.factors[1].k(), 1);
        assert!(m.sigma_eps.is_some());
    }

    #[test]
    fn complex_parameter_ranges() {
        let mut r = stream(4);
        for _ in 0..10_000 {
            let m = sample_true_complex(Family::Gaussian, &mut r);
            assert!(m.beta[0].abs() <= 2.0);
            for j in 1..4 {
                assert!(m.beta[j].abs() <= 1.0);
            }
            assert!(m.factors[0].sigma[0] <= 1.0);
            for j in 1..4 {
                assert!(m.factors[0].sigma[j] <= 0.5);
            }
            let eps = m.sigma_eps.unwrap();
            assert!((0.0..1.0).contains(&eps));
        }
    }

    #[test]
    fn complex_correlation_marginals_follow_lkj() {
        // For a 4×4 LKJ(1) draw, each pairwise correlation has marginal
        // density proportional to (1 − ρ²)^((d−2)/2) with d = 4, i.e.
        // 2·Beta(2,2) − 1, not uniform (uniformity is over the matrix
        // space, not per entry). Beta(2,2) CDF: 3u² − 2u³.
        let mut r = stream(5);
        let n = 100_000;
        let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 6];
        for _ in 0..n {
            let m = sample_true_complex(Family::Logistic, &mut r);
            let mut slot = 0;
            for i in 1..4 {
                for j in 0..i {
                    draws[slot].push(m.factors[0].omega.correlation(i, j));
                    slot += 1;
                }
            }
        }
        let cdf = |x: f64| {
            let u = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
            3.0 * u * u - 2.0 * u * u * u
        };
        for (slot, d) in draws.iter().enumerate() {
            ks_against(d, cdf, 0.001, &format!("LKJ(1) 4-d marginal, entry {slot}"));
        }
    }

    #[test]
    fn gamma_blocks_reproduce_covariance() {
        let mut r = stream(6);
        let params = sample_true_complex(Family::Gaussian, &mut r);
        let sigma_true = params.factors[0].covariance();

        // One-subject layout: each resample gives one 4-vector draw.
        let ds = crate::design::Dataset {
            subject: vec![0],
            item: None,
            x1: vec![crate::design::X1Level::A],
            x2: Some(vec![crate::design::X2Level::A]),
            y: None,
            n_subjects: 1,
            n_items: None,
            level_probs: None,
            lambda: None,
        };
        let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
        let n = 100_000;
        let mut acc = DMatrix::zeros(4, 4);
        for _ in 0..n {
            let tm = sample_gamma(&params, &mm.z, &mut r).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    acc[(i, j)] += tm.gamma[i] * tm.gamma[j];
                }
            }
        }
        let emp = acc / n as f64;
        let rel = (&emp - &sigma_true).norm() / sigma_true.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn noise_free_gaussian_recovers_fixed_effects() {
        let mut r = stream(7);
        let ds = gen_complex_design(&mut r);
        let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
        let mut params = sample_true_complex(Family::Gaussian, &mut r);
        params.sigma_eps = Some(0.0);
        let model = TrueModel { params, gamma: DVector::zeros(mm.z.q) };
        let y = generate_response(&mm, &model, &mut r).unwrap();
        let expect = &mm.x * &model.params.beta;
        assert!((y - expect).amax() < 1e-14);
    }

    #[test]
    fn symmetric_bernoulli_mean() {
        let mut r = stream(8);
        let n = 100_000;
        let hits = (0..n).filter(|_| r.uniform() < bernoulli_prob(0.0)).count();
        let mean = hits as f64 / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn logit_five_probability() {
        assert!((bernoulli_prob(5.0) - 0.9933).abs() < 1e-4);
        assert!((bernoulli_prob(6.0) - 0.9975).abs() < 1e-4);
    }

    #[test]
    fn extreme_fraction_counting() {
        assert_eq!(extreme_fraction(&[0.0, 6.0, -5.2, 3.0]).unwrap(), 0.5);
        assert_eq!(extreme_fraction(&[5.0, -5.0]).unwrap(), 0.0);
        assert!(extreme_fraction(&[]).is_err());
    }

    #[test]
    fn complex_logistic_extremes_are_rare() {
        let mut r = stream(9);
        let n_models = 1000;
        let mut under_one_percent = 0;
        for _ in 0..n_models {
            let ds = gen_complex_design(&mut r);
            let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
            let params = sample_true_complex(Family::Logistic, &mut r);
            let model = sample_gamma(&params, &mm.z, &mut r).unwrap();
            let eta = linear_predictor(&mm, &model).unwrap();
            if extreme_fraction(eta.as_slice()).unwrap() < 0.01 {
                under_one_percent += 1;
            }
        }
        let share = under_one_percent as f64 / n_models as f64;
        assert!(share >= 0.95, "only {share} of models kept extreme values under 1%");
    }

    #[test]
    fn simple_logistic_mean_extreme_fraction() {
        let mut r = stream(10);
        let mut acc = 0.0;
        let n_sets = 1000;
        for i in 0..n_sets {
            let manip = if i % 2 == 0 { ItemManipulation::BetweenItem } else { ItemManipulation::WithinItem };
            let cfg = SimpleDesignConfig::new(if i % 4 < 2 { 12 } else { 24 }, manip, i % 8 < 4).unwrap();
            let ds = gen_simple_design(&cfg, &mut r);
            let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_simple(manip)).unwrap();
            let params = sample_true_simple(Family::Logistic, cfg.h0_true, manip, &mut r);
            let model = sample_gamma(&params, &mm.z, &mut r).unwrap();
            let eta = linear_predictor(&mm, &model).unwrap();
            acc += extreme_fraction(eta.as_slice()).unwrap();
        }
        let mean = acc / n_sets as f64;
        assert!((mean - 0.002).abs() <= 0.003, "mean extreme fraction {mean}");
    }

    #[test]
    fn response_generation_is_deterministic() {
        let mut r1 = stream(11);
        let ds = gen_complex_design(&mut r1);
        let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
        let params = sample_true_complex(Family::Logistic, &mut r1);
        let model = sample_gamma(&params, &mm.z, &mut r1).unwrap();
        let state = r1.stream_id();
        let y1 = generate_response(&mm, &model, &mut stream(state + 100)).unwrap();
        let y2 = generate_response(&mm, &model, &mut stream(state + 100)).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn standardized_scale_transformation() {
        let mut r = stream(12);
        let params = sample_true_complex(Family::Gaussian, &mut r);
        let std = params.to_standardized_scale(2.0, 4.0).unwrap();
        assert!((std.beta[0] - (params.beta[0] - 2.0) / 4.0).abs() < 1e-15);
        assert!((std.beta[1] - params.beta[1] / 4.0).abs() < 1e-15);
        assert!((std.factors[0].sigma[2] - params.factors[0].sigma[2] / 4.0).abs() < 1e-15);
        assert!((std.sigma_eps.unwrap() - params.sigma_eps.unwrap() / 4.0).abs() < 1e-15);
        // Correlations untouched.
        assert_eq!(std.factors[0].omega.correlation(1, 0), params.factors[0].omega.correlation(1, 0));
        assert!(params.to_standardized_scale(0.0, 0.0).is_err());
    }

    #[test]
    fn dimension_mismatches_error() {
        let mut r = stream(13);
        let ds = gen_complex_design(&mut r);
        let mm = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
        let params = sample_true_complex(Family::Gaussian, &mut r);
        let model = TrueModel { params, gamma: DVector::zeros(3) };
        assert!(linear_predictor(&mm, &model).is_err());
        let simple_params =
            sample_true_simple(Family::Gaussian, true, ItemManipulation::WithinItem, &mut r);
        assert!(sample_gamma(&simple_params, &mm.z, &mut r).is_err());
    }
}
