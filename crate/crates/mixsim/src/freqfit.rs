//! Frequentist estimation: profiled-REML linear mixed models,
//! Laplace-approximated logistic mixed models, and a plain logistic GLM.
//!
//! The mixed-model machinery uses the penalized-least-squares formulation:
//! random effects enter through a relative covariance factor Λ built from one
//! lower-triangular block per grouping factor, replicated across that
//! factor's groups, and for any Λ the spherical-effect modes u solve a ridge
//! system assembled from precomputed cross-products. For gaussian responses β
//! and σ² are profiled out of the REML criterion in closed form; for
//! Bernoulli responses the modes come from penalized IRLS and the Laplace
//! approximation to the marginal deviance is minimized jointly over (θ, β).
//!
//! Datasets with a single grouping factor are solved group by group (the
//! ridge system is block diagonal), keeping each evaluation linear in the
//! number of observations; crossed designs factor the dense q×q system.
//! The outer optimizer is Nelder-Mead with the non-negativity constraint on
//! diagonal θ entries imposed by folding (|x|), restarted once from the first
//! optimum, with diagonals in flat likelihood regions snapped to exactly zero
//! when that does not worsen the objective. The reported `max_grad` is a
//! central finite-difference gradient of the unfolded objective at the
//! returned estimate, which is the quantity convergence is judged on.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::ModelMatrices;
use crate::error::{Error, Result};
use crate::truemodel::Family;

const PIRLS_MAX_ITER: usize = 50;
const PIRLS_REL_TOL: f64 = 1e-8;
const PIRLS_MAX_HALVINGS: usize = 10;
/// Total objective-evaluation budget across both Nelder-Mead runs.
const MAX_EVALS_TOTAL: u64 = 10_000;
/// Simplex stopping tolerances (ftol_rel, ftol_abs, xtol_abs). The gaussian
/// fit profiles β and σ_ε out of the criterion, so the simplex only has to
/// polish θ and is run to a tight relative spread, the way derivative-free
/// optimizers in mixed-model software are configured for the profiled
/// problem. The Bernoulli fit optimizes (θ, β) jointly, and its simplex
/// stage stops on an absolute deviance spread, again matching common
/// mixed-model defaults; because the β directions carry likelihood-scale
/// curvature (order n/4), the slop admitted by that stop is visible to the
/// finite-difference gradient check, especially as the joint dimension
/// grows.
const LMM_NM_TOLS: NmTols = NmTols { ftol_rel: 1e-10, ftol_abs: 0.0, xtol_abs: 1e-9 };
const GLMM_NM_TOLS: NmTols = NmTols { ftol_rel: 1e-10, ftol_abs: 2e-6, xtol_abs: 1e-6 };
/// |η| beyond which a logistic fit is treated as separated (knockout): the
/// fitted probability is then within ~1e-11 of 0 or 1, and the optimizers'
/// deviance-change stopping rules can fire before log-odds grow further, so
/// the threshold must sit below where they stall.
const GLMM_SEPARATION_ETA: f64 = 25.0;
const GLM_SEPARATION_ETA: f64 = 20.0;
/// Diagonal θ entries below this are candidates for snapping to the boundary.
const BOUNDARY_SNAP_WINDOW: f64 = 1e-2;
/// A diagonal at or below this counts as on the boundary even if unsnapped.
const BOUNDARY_EPS: f64 = 1e-6;

/// Relative covariance factor: per grouping factor, a lower-triangular k×k
/// block λ replicated across groups, so that Λ Λᵀ = Σ/σ² (gaussian) or Σ
/// (Bernoulli). Flattened row-major over each block's lower triangle;
/// diagonal entries are constrained ≥ 0 during optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParam {
    ks: Vec<usize>,
    flat: Vec<f64>,
}

impl ThetaParam {
    /// Per-factor parameter count k(k+1)/2.
    pub fn params_per_factor(ks: &[usize]) -> Vec<usize> {
        ks.iter().map(|&k| k * (k + 1) / 2).collect()
    }

    pub fn identity(ks: &[usize]) -> Self {
        let mut flat = Vec::new();
        for &k in ks {
            for i in 0..k {
                for j in 0..=i {
                    flat.push(if i == j { 1.0 } else { 0.0 });
                }
            }
        }
        ThetaParam { ks: ks.to_vec(), flat }
    }

    pub fn zeros(ks: &[usize]) -> Self {
        let len: usize = ks.iter().map(|&k| k * (k + 1) / 2).sum();
        ThetaParam { ks: ks.to_vec(), flat: vec![0.0; len] }
    }

    pub fn from_flat(ks: &[usize], flat: Vec<f64>) -> Result<Self> {
        let want: usize = ks.iter().map(|&k| k * (k + 1) / 2).sum();
        if flat.len() != want {
            return Err(Error::InvalidParameter(format!(
                "theta length {} does not match structure (want {})",
                flat.len(),
                want
            )));
        }
        Ok(ThetaParam { ks: ks.to_vec(), flat })
    }

    /// Builds θ from per-factor lower-triangular factors.
    pub fn from_lambdas(lambdas: &[DMatrix<f64>]) -> Self {
        let ks: Vec<usize> = lambdas.iter().map(|l| l.nrows()).collect();
        let mut flat = Vec::new();
        for l in lambdas {
            for i in 0..l.nrows() {
                for j in 0..=i {
                    flat.push(l[(i, j)]);
                }
            }
        }
        ThetaParam { ks, flat }
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn n_params(&self) -> usize {
        self.flat.len()
    }

    /// Indices into the flat vector that hold diagonal entries.
    pub fn diag_indices(&self) -> Vec<usize> {
        diag_indices_for(&self.ks)
    }

    /// Materializes the per-factor lower-triangular blocks.
    pub fn lambdas(&self) -> Vec<DMatrix<f64>> {
        lambdas_from_flat(&self.ks, &self.flat)
    }
}

fn diag_indices_for(ks: &[usize]) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut off = 0;
    for &k in ks {
        for i in 0..k {
            idx.push(off + i * (i + 1) / 2 + i);
        }
        off += k * (k + 1) / 2;
    }
    idx
}

fn lambdas_from_flat(ks: &[usize], flat: &[f64]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(ks.len());
    let mut pos = 0;
    for &k in ks {
        let mut l = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                l[(i, j)] = flat[pos];
                pos += 1;
            }
        }
        out.push(l);
    }
    out
}

fn fold_diag(flat: &[f64], diag_idx: &[usize]) -> Vec<f64> {
    let mut out = flat.to_vec();
    for &d in diag_idx {
        out[d] = out[d].abs();
    }
    out
}

/// Estimated random-effect distribution for one grouping factor, on the
/// scale of the fitted (standardized, for gaussian) response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorEstimates {
    /// Per-effect standard deviations (row norms of `chol`).
    pub sigma: Vec<f64>,
    /// Correlation matrix; rows with zero variance get Ω\[i\]\[i\] = 1, off 0.
    pub omega: Vec<Vec<f64>>,
    /// Lower-triangular covariance factor: chol·cholᵀ = estimated covariance.
    pub chol: Vec<Vec<f64>>,
}

impl FactorEstimates {
    fn from_chol(chol: DMatrix<f64>) -> Self {
        let k = chol.nrows();
        let cov = &chol * chol.transpose();
        let sigma: Vec<f64> = (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        let mut omega = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    omega[i][j] = 1.0;
                } else if sigma[i] > 0.0 && sigma[j] > 0.0 {
                    omega[i][j] = cov[(i, j)] / (sigma[i] * sigma[j]);
                }
            }
        }
        let chol_rows = (0..k)
            .map(|i| (0..k).map(|j| chol[(i, j)]).collect())
            .collect();
        FactorEstimates { sigma, omega, chol: chol_rows }
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn chol_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.chol[i][j])
    }

    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.omega[i][j])
    }
}

/// Everything a fit reports; convergence classification is downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutcome {
    pub family: Family,
    /// Fixed-effect estimates (standardized response scale for gaussian).
    pub beta_hat: Vec<f64>,
    /// Per grouping factor, in model-matrix order (subject first).
    pub factors: Vec<FactorEstimates>,
    /// Residual SD on the standardized scale (gaussian only).
    pub sigma_eps_hat: Option<f64>,
    /// Final REML criterion (gaussian) or Laplace deviance (Bernoulli).
    pub objective: f64,
    /// Max absolute central finite-difference gradient at the estimate,
    /// over θ (gaussian) or (θ, β) (Bernoulli).
    pub max_grad: f64,
    /// Reconstructed covariance is numerically positive semidefinite.
    pub psd_ok: bool,
    /// Any diagonal θ entry on the zero boundary.
    pub boundary: bool,
    /// Optimizer terminated by tolerance with a finite objective and no
    /// separation; false signals optimizer failure downstream.
    pub optimizer_ok: bool,
    /// Objective evaluations consumed.
    pub iterations: u64,
    pub n_obs: usize,
    /// Estimated parameters: p + Σ k(k+1)/2 (+1 residual SD for gaussian).
    pub n_params: usize,
    /// Seconds spent fitting.
    pub wall_time: f64,
    /// Final θ in flat form (relative Cholesky scale).
    pub theta_hat: Vec<f64>,
}

impl FitOutcome {
    /// True when every factor's reconstructed covariance is finite.
    fn check_psd(factors: &[FactorEstimates]) -> bool {
        factors.iter().all(|f| {
            f.chol.iter().flatten().all(|v| v.is_finite())
                && f.sigma.iter().all(|v| v.is_finite())
        })
    }
}

/// Mean-centers and scales to unit sample SD; errors on constant input.
pub fn standardize_response(y: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if y.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two observations to standardize".into(),
        ));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite response value".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::DegenerateLikelihood(
            "response is constant; nothing to fit".into(),
        ));
    }
    Ok((y.iter().map(|v| (v - mean) / sd).collect(), mean, sd))
}

// ---------------------------------------------------------------------------
// Penalized least squares core
// ---------------------------------------------------------------------------

struct BlockedCore {
    /// Effects per group for the single factor.
    k: usize,
    n_groups: usize,
    ztz: Vec<DMatrix<f64>>,
    ztx: Vec<DMatrix<f64>>,
    zty: Vec<DVector<f64>>,
}

struct DenseCore {
    q: usize,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    /// Per observation, the nonzero Z entries as (column, value).
    obs_entries: Vec<Vec<(usize, f64)>>,
    /// (col_offset, n_groups, k) per factor, for assembling Λ.
    layout: Vec<(usize, usize, usize)>,
}

enum SolvePath {
    Blocked(BlockedCore),
    Dense(DenseCore),
}

/// Precomputed cross-products for one dataset; every objective evaluation
/// reuses them.
pub(crate) struct PlsCore {
    n: usize,
    p: usize,
    x: DMatrix<f64>,
    y: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    z: crate::design::ZMatrix,
    path: SolvePath,
}

pub(crate) struct RemlEval {
    pub criterion: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
}

#[cfg_attr(not(test), allow(dead_code))] // the trace is exercised by tests
pub(crate) struct LaplaceEval {
    pub deviance: f64,
    pub eta: DVector<f64>,
    pub pirls_converged: bool,
    /// Penalized deviance after each accepted PIRLS step (head = start).
    pub pdev_trace: Vec<f64>,
}

impl PlsCore {
    pub(crate) fn new(matrices: &ModelMatrices, y: &[f64]) -> Result<Self> {
        Self::with_path(matrices, y, false)
    }

    /// `force_dense` lets tests cross-check the blocked fast path.
    pub(crate) fn with_path(
        matrices: &ModelMatrices,
        y: &[f64],
        force_dense: bool,
    ) -> Result<Self> {
        let x = matrices.x.clone();
        let z = matrices.z.clone();
        let n = x.nrows();
        let p = x.ncols();
        if y.len() != n || z.n != n {
            return Err(Error::InvalidParameter(format!(
                "shape mismatch: X has {} rows, Z has {}, y has {}",
                n,
                z.n,
                y.len()
            )));
        }
        if n <= p {
            return Err(Error::InvalidParameter(format!(
                "need more observations ({n}) than fixed effects ({p})"
            )));
        }
        let y = DVector::from_column_slice(y);
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&y);
        let path = if z.factors.len() == 1 && !force_dense {
            let f = &z.factors[0];
            let k = f.k;
            let mut ztz = vec![DMatrix::zeros(k, k); f.n_groups];
            let mut ztx = vec![DMatrix::zeros(k, p); f.n_groups];
            let mut zty = vec![DVector::zeros(k); f.n_groups];
            for i in 0..n {
                let g = f.group_of_obs[i];
                for a in 0..k {
                    let va = f.val(i, a);
                    for b in 0..k {
                        ztz[g][(a, b)] += va * f.val(i, b);
                    }
                    for c in 0..p {
                        ztx[g][(a, c)] += va * x[(i, c)];
                    }
                    zty[g][a] += va * y[i];
                }
            }
            SolvePath::Blocked(BlockedCore { k, n_groups: f.n_groups, ztz, ztx, zty })
        } else {
            let q = z.q;
            let zd = z.to_dense();
            let ztz = zd.tr_mul(&zd);
            let ztx = zd.tr_mul(&x);
            let zty = zd.tr_mul(&y);
            let mut obs_entries = vec![Vec::new(); n];
            for f in &z.factors {
                for i in 0..n {
                    for j in 0..f.k {
                        obs_entries[i].push((f.col(f.group_of_obs[i], j), f.val(i, j)));
                    }
                }
            }
            let layout = z
                .factors
                .iter()
                .map(|f| (f.col_offset, f.n_groups, f.k))
                .collect();
            SolvePath::Dense(DenseCore { q, ztz, ztx, zty, obs_entries, layout })
        };
        Ok(PlsCore { n, p, x, y, xtx, xty, z, path })
    }

    fn q(&self) -> usize {
        self.z.q
    }

    /// Block-diagonal Λ as a dense q×q matrix (dense path only).
    fn build_lmat(core: &DenseCore, lambdas: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut lmat = DMatrix::zeros(core.q, core.q);
        for (f, &(off, n_groups, k)) in core.layout.iter().enumerate() {
            let lam = &lambdas[f];
            for g in 0..n_groups {
                for i in 0..k {
                    for j in 0..=i {
                        lmat[(off + g * k + i, off + g * k + j)] = lam[(i, j)];
                    }
                }
            }
        }
        lmat
    }

    /// Expands per-group modes into the full q-vector b = Λu of group effects.
    fn lambda_u(&self, lambdas: &[DMatrix<f64>], u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.q());
        for (f, block) in self.z.factors.iter().enumerate() {
            let lam = &lambdas[f];
            for g in 0..block.n_groups {
                let base = block.col(g, 0);
                for i in 0..block.k {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += lam[(i, j)] * u[base + j];
                    }
                    out[base + i] = acc;
                }
            }
        }
        out
    }

    /// Profiled REML criterion and the associated (β̂, u*, σ̂²) for given Λ.
    pub(crate) fn reml(&self, lambdas: &[DMatrix<f64>]) -> Result<RemlEval> {
        self.check_lambdas(lambdas)?;
        let (logdet_lz2, logdet_rx2, beta, u) = match &self.path {
            SolvePath::Blocked(core) => self.penalized_solve_blocked(core, &lambdas[0], None)?,
            SolvePath::Dense(core) => self.penalized_solve_dense(core, lambdas, None)?,
        };
        // Penalized residual sum of squares, computed from explicit residuals
        // to avoid cancellation in the cross-product form.
        let b = self.lambda_u(lambdas, &u);
        let fitted = &self.x * &beta + self.z.mul_gamma(&b);
        let mut r2 = u.norm_squared();
        for i in 0..self.n {
            r2 += (self.y[i] - fitted[i]).powi(2);
        }
        let nmp = (self.n - self.p) as f64;
        if !(r2 > 0.0) || !r2.is_finite() {
            return Err(Error::DegenerateLikelihood(format!(
                "penalized residual sum of squares {r2} is not positive"
            )));
        }
        let criterion =
            logdet_lz2 + logdet_rx2 + nmp * (1.0 + (2.0 * std::f64::consts::PI * r2 / nmp).ln());
        Ok(RemlEval { criterion, beta, sigma2: r2 / nmp })
    }

    fn check_lambdas(&self, lambdas: &[DMatrix<f64>]) -> Result<()> {
        if lambdas.len() != self.z.factors.len() {
            return Err(Error::InvalidParameter(format!(
                "{} lambda blocks for {} grouping factors",
                lambdas.len(),
                self.z.factors.len()
            )));
        }
        for (lam, f) in lambdas.iter().zip(&self.z.factors) {
            if lam.nrows() != f.k || lam.ncols() != f.k {
                return Err(Error::InvalidParameter(format!(
                    "lambda block is {}×{}, factor has k={}",
                    lam.nrows(),
                    lam.ncols(),
                    f.k
                )));
            }
        }
        Ok(())
    }

    /// Solves the weighted penalized system for (u, β). With unit weights this
    /// is the REML inner solve; with PIRLS weights it is one mode update.
    /// Returns (log|L_Z|², log|R_X|², β, u). When `fixed_beta` is given, β is
    /// held there and only u is solved for.
    fn penalized_solve_blocked(
        &self,
        core: &BlockedCore,
        lam: &DMatrix<f64>,
        weighted: Option<(&[DMatrix<f64>], &[DVector<f64>], &DVector<f64>)>,
    ) -> Result<(f64, f64, DVector<f64>, DVector<f64>)> {
        let k = core.k;
        let mut logdet_lz2 = 0.0;
        let mut schur = self.xtx.clone();
        let mut rhs = self.xty.clone();
        let mut chols: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(core.n_groups);
        let mut bs: Vec<DMatrix<f64>> = Vec::with_capacity(core.n_groups);
        let mut cs: Vec<DVector<f64>> = Vec::with_capacity(core.n_groups);
        let (ztz, ztx, zty): (&[DMatrix<f64>], _, _) = match weighted {
            Some((wztz, wzty, _)) => (wztz, None, Some(wzty)),
            None => (&core.ztz, Some(&core.ztx), None),
        };
        for g in 0..core.n_groups {
            let mut a = lam.tr_mul(&ztz[g]) * lam;
            for i in 0..k {
                a[(i, i)] += 1.0;
            }
            let ch = Cholesky::new(a).ok_or_else(|| {
                Error::Singular("penalized random-effects system not positive definite".into())
            })?;
            let ld = ch.l_dirty();
            for i in 0..k {
                logdet_lz2 += 2.0 * ld[(i, i)].ln();
            }
            let b = match ztx {
                Some(ztx) => lam.tr_mul(&ztx[g]),
                None => DMatrix::zeros(k, self.p),
            };
            let c = match zty {
                Some(wzty) => wzty[g].clone(),
                None => lam.tr_mul(&core.zty[g]),
            };
            if ztx.is_some() {
                let ainv_b = ch.solve(&b);
                let ainv_c = ch.solve(&c);
                schur -= b.tr_mul(&ainv_b);
                rhs -= b.tr_mul(&ainv_c);
            }
            chols.push(ch);
            bs.push(b);
            cs.push(c);
        }
        let (logdet_rx2, beta) = match weighted {
            Some((_, _, beta)) => (0.0, beta.clone()),
            None => {
                let rx = Cholesky::new(schur).ok_or_else(|| {
                    Error::Singular("collinear fixed-effect columns".into())
                })?;
                let ld = rx.l_dirty();
                let mut logdet = 0.0;
                for i in 0..self.p {
                    logdet += 2.0 * ld[(i, i)].ln();
                }
                (logdet, rx.solve(&rhs))
            }
        };
        let mut u = DVector::zeros(core.n_groups * k);
        for g in 0..core.n_groups {
            let target = &cs[g] - &bs[g] * &beta;
            let ug = chols[g].solve(&target);
            for i in 0..k {
                u[g * k + i] = ug[i];
            }
        }
        Ok((logdet_lz2, logdet_rx2, beta, u))
    }

    fn penalized_solve_dense(
        &self,
        core: &DenseCore,
        lambdas: &[DMatrix<f64>],
        weighted: Option<(&DMatrix<f64>, &DVector<f64>, &DVector<f64>)>,
    ) -> Result<(f64, f64, DVector<f64>, DVector<f64>)> {
        let q = core.q;
        let lmat = Self::build_lmat(core, lambdas);
        let (mut a, c) = match weighted {
            Some((wztz, wzty, _)) => (lmat.tr_mul(wztz) * &lmat, wzty.clone()),
            None => (lmat.tr_mul(&core.ztz) * &lmat, lmat.tr_mul(&core.zty)),
        };
        for i in 0..q {
            a[(i, i)] += 1.0;
        }
        let ch = Cholesky::new(a).ok_or_else(|| {
            Error::Singular("penalized random-effects system not positive definite".into())
        })?;
        let mut logdet_lz2 = 0.0;
        {
            let ld = ch.l_dirty();
            for i in 0..q {
                logdet_lz2 += 2.0 * ld[(i, i)].ln();
            }
        }
        match weighted {
            Some((_, _, beta)) => {
                let u = ch.solve(&c);
                Ok((logdet_lz2, 0.0, beta.clone(), u))
            }
            None => {
                let b = lmat.tr_mul(&core.ztx);
                let ainv_b = ch.solve(&b);
                let ainv_c = ch.solve(&c);
                let schur = &self.xtx - b.tr_mul(&ainv_b);
                let rhs = &self.xty - b.tr_mul(&ainv_c);
                let rx = Cholesky::new(schur).ok_or_else(|| {
                    Error::Singular("collinear fixed-effect columns".into())
                })?;
                let mut logdet_rx2 = 0.0;
                {
                    let ld = rx.l_dirty();
                    for i in 0..self.p {
                        logdet_rx2 += 2.0 * ld[(i, i)].ln();
                    }
                }
                let beta = rx.solve(&rhs);
                let u = ch.solve(&(c - &b * &beta));
                Ok((logdet_lz2, logdet_rx2, beta, u))
            }
        }
    }

    /// Per-group ZᵀWZ blocks (raw Z scale, before the λ sandwich).
    fn weighted_ztz_blocked(&self, core: &BlockedCore, w: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let f = &self.z.factors[0];
        let k = core.k;
        let mut wztz = vec![DMatrix::zeros(k, k); core.n_groups];
        for i in 0..self.n {
            let g = f.group_of_obs[i];
            let wi = w[i];
            for a in 0..k {
                let va = f.val(i, a) * wi;
                for b in 0..k {
                    wztz[g][(a, b)] += va * f.val(i, b);
                }
            }
        }
        wztz
    }

    fn weighted_ztz_dense(&self, core: &DenseCore, w: &DVector<f64>) -> DMatrix<f64> {
        let mut wztz = DMatrix::zeros(core.q, core.q);
        for i in 0..self.n {
            let wi = w[i];
            for &(ca, va) in &core.obs_entries[i] {
                for &(cb, vb) in &core.obs_entries[i] {
                    wztz[(ca, cb)] += wi * va * vb;
                }
            }
        }
        wztz
    }

    /// Mode solve with zero target: only the log-determinant half is wanted.
    fn weighted_mode_with(
        &self,
        lambdas: &[DMatrix<f64>],
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, f64)> {
        let zero_t = DVector::zeros(self.n);
        self.weighted_mode_inner(lambdas, w, &zero_t)
    }

    fn weighted_mode_inner(
        &self,
        lambdas: &[DMatrix<f64>],
        w: &DVector<f64>,
        t: &DVector<f64>,
    ) -> Result<(DVector<f64>, f64)> {
        let ztt = self.z.transpose_mul(t);
        match &self.path {
            SolvePath::Blocked(core) => {
                let lam = &lambdas[0];
                let k = core.k;
                let wztz = self.weighted_ztz_blocked(core, w);
                let mut rhs = Vec::with_capacity(core.n_groups);
                for g in 0..core.n_groups {
                    let raw = DVector::from_fn(k, |i, _| ztt[g * k + i]);
                    rhs.push(lam.tr_mul(&raw));
                }
                let dummy = DVector::zeros(self.p);
                let (logdet, _, _, u) =
                    self.penalized_solve_blocked(core, lam, Some((&wztz, &rhs, &dummy)))?;
                Ok((u, logdet / 2.0))
            }
            SolvePath::Dense(core) => {
                let wztz = self.weighted_ztz_dense(core, w);
                let lmat = Self::build_lmat(core, lambdas);
                let rhs = lmat.tr_mul(&ztt);
                let dummy = DVector::zeros(self.p);
                let (logdet, _, _, u) =
                    self.penalized_solve_dense(core, lambdas, Some((&wztz, &rhs, &dummy)))?;
                Ok((u, logdet / 2.0))
            }
        }
    }

    /// Laplace-approximated Bernoulli deviance at (Λ, β): penalized IRLS to
    /// the conditional mode, then deviance + ‖u‖² + log det(ΛᵀZᵀWZΛ + I).
    pub(crate) fn laplace(
        &self,
        lambdas: &[DMatrix<f64>],
        beta: &DVector<f64>,
    ) -> Result<LaplaceEval> {
        self.check_lambdas(lambdas)?;
        if beta.len() != self.p {
            return Err(Error::InvalidParameter(format!(
                "beta has length {}, X has {} columns",
                beta.len(),
                self.p
            )));
        }
        let fixed = &self.x * beta;
        let mut u = DVector::zeros(self.q());
        let mut eta = fixed.clone();
        let mut pdev = self.penalized_deviance(&eta, &u);
        let mut trace = vec![pdev];
        let mut converged = false;
        for _ in 0..PIRLS_MAX_ITER {
            let mut w = DVector::zeros(self.n);
            let mut t = DVector::zeros(self.n);
            for i in 0..self.n {
                let mu = logistic(eta[i]);
                let wi = (mu * (1.0 - mu)).max(1e-12);
                w[i] = wi;
                t[i] = wi * (eta[i] - fixed[i]) + (self.y[i] - mu);
            }
            let (u_prop, _) = self.weighted_mode_inner(lambdas, &w, &t)?;
            // Step-halve toward the proposal until the penalized deviance
            // does not increase.
            let delta = &u_prop - &u;
            let mut step = 1.0;
            let mut halvings = 0;
            let (u_new, eta_new, pdev_new) = loop {
                let u_try = &u + &delta * step;
                let b = self.lambda_u(lambdas, &u_try);
                let eta_try = &fixed + self.z.mul_gamma(&b);
                let pdev_try = self.penalized_deviance(&eta_try, &u_try);
                if pdev_try <= pdev + 1e-10 * (1.0 + pdev.abs()) {
                    break (u_try, eta_try, pdev_try);
                }
                halvings += 1;
                if halvings > PIRLS_MAX_HALVINGS {
                    return Err(Error::IterationFailure(
                        "PIRLS step-halvings failed to reduce the penalized deviance".into(),
                    ));
                }
                step *= 0.5;
            };
            let rel = (pdev - pdev_new).abs() / (pdev_new.abs() + 1.0);
            u = u_new;
            eta = eta_new;
            pdev = pdev_new;
            trace.push(pdev);
            if rel < PIRLS_REL_TOL {
                converged = true;
                break;
            }
        }
        let mut w = DVector::zeros(self.n);
        for i in 0..self.n {
            let mu = logistic(eta[i]);
            w[i] = (mu * (1.0 - mu)).max(1e-12);
        }
        let (_, logdet_half) = self.weighted_mode_with(lambdas, &w)?;
        let deviance = pdev + 2.0 * logdet_half;
        Ok(LaplaceEval { deviance, eta, pirls_converged: converged, pdev_trace: trace })
    }

    /// Bernoulli deviance plus the spherical penalty ‖u‖².
    fn penalized_deviance(&self, eta: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut dev = 0.0;
        for i in 0..self.n {
            let sign = 2.0 * self.y[i] - 1.0;
            dev += 2.0 * softplus(-sign * eta[i]);
        }
        dev + u.norm_squared()
    }
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Numerically stable ln(1 + eˣ).
fn softplus(x: f64) -> f64 {
    if x > 33.0 {
        x
    } else if x < -33.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Nelder-Mead
// ---------------------------------------------------------------------------

pub(crate) struct NmResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: u64,
    pub tol_reached: bool,
}

/// Simplex stopping tolerances; the spread test passes when the vertex
/// function spread falls below `max(ftol_abs, ftol_rel·|f_best|)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NmTols {
    pub ftol_rel: f64,
    pub ftol_abs: f64,
    pub xtol_abs: f64,
}

/// Derivative-free simplex minimizer (reflection 1, expansion 2, contraction
/// 0.5, shrink 0.5). Stops when the simplex function spread or diameter falls
/// below tolerance, or the evaluation budget runs out.
pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    step: f64,
    max_evals: u64,
    tols: NmTols,
) -> NmResult {
    let dim = x0.len();
    assert!(dim > 0, "cannot optimize over zero parameters");
    let mut evals: u64 = 0;
    let mut eval = |x: &[f64], evals: &mut u64| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let fx0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), fx0));
    for i in 0..dim {
        let mut xi = x0.to_vec();
        xi[i] += if xi[i].abs() > 1.0 { step * xi[i].abs() } else { step };
        let fv = eval(&xi, &mut evals);
        simplex.push((xi, fv));
    }
    let mut tol_reached = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let f_best = simplex[0].1;
        let f_worst = simplex[dim].1;
        let spread_ok = (f_worst - f_best).abs()
            <= tols.ftol_abs.max(tols.ftol_rel * (f_best.abs() + 1e-12));
        let diam = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (spread_ok && f_best.is_finite()) || diam <= tols.xtol_abs {
            tol_reached = true;
            break;
        }
        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for j in 0..dim {
                centroid[j] += x[j] / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + (centroid[j] - worst.0[j]))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);
        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - worst.0[j]))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                simplex[dim] = (expand, f_expand);
            } else {
                simplex[dim] = (reflect, f_reflect);
            }
        } else if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
        } else {
            let (contract, f_contract) = if f_reflect < worst.1 {
                let xc: Vec<f64> = (0..dim)
                    .map(|j| centroid[j] + 0.5 * (reflect[j] - centroid[j]))
                    .collect();
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc: Vec<f64> = (0..dim)
                    .map(|j| centroid[j] + 0.5 * (worst.0[j] - centroid[j]))
                    .collect();
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if f_contract < worst.1.min(f_reflect) {
                simplex[dim] = (contract, f_contract);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for j in 0..dim {
                        v.0[j] = best[j] + 0.5 * (v.0[j] - best[j]);
                    }
                    v.1 = eval(&v.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    NmResult {
        x: simplex[0].0.clone(),
        fx: simplex[0].1,
        evals,
        tol_reached,
    }
}

/// Central finite-difference gradient with step max(1, |xᵢ|)·ε^⅓; returns the
/// max absolute component, or NaN if any evaluation failed.
fn max_abs_fd_gradient<F: FnMut(&[f64]) -> Option<f64>>(f: &mut F, x: &[f64]) -> f64 {
    let base = f64::EPSILON.cbrt();
    let mut max_grad: f64 = 0.0;
    for i in 0..x.len() {
        let h = x[i].abs().max(1.0) * base;
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let (fp, fm) = match (f(&xp), f(&xm)) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => (a, b),
            _ => return f64::NAN,
        };
        let g = (fp - fm) / (2.0 * h);
        if !g.is_finite() {
            return f64::NAN;
        }
        max_grad = max_grad.max(g.abs());
    }
    max_grad
}

// ---------------------------------------------------------------------------
// Public fitting entry points
// ---------------------------------------------------------------------------

/// REML criterion for given θ; β and σ² profiled out. `y` is used as given
/// (standardization is `fit_lmm`'s concern).
pub fn profiled_reml_deviance(
    theta: &ThetaParam,
    matrices: &ModelMatrices,
    y: &[f64],
) -> Result<f64> {
    let core = PlsCore::new(matrices, y)?;
    Ok(core.reml(&theta.lambdas())?.criterion)
}

/// Laplace-approximated Bernoulli deviance at a fixed (θ, β): penalized
/// IRLS finds the conditional mode of the random effects, and the criterion
/// is deviance + ‖u‖² + log det(ΛᵀZᵀWZΛ + I). At θ = 0 this reduces
/// exactly to the plain logistic-regression deviance, which makes the
/// function a convenient external check point for the joint optimizer.
pub fn glmm_laplace_deviance(
    theta: &ThetaParam,
    beta: &[f64],
    matrices: &ModelMatrices,
    y: &[f64],
) -> Result<f64> {
    validate_binary(y)?;
    let core = PlsCore::new(matrices, y)?;
    let b = DVector::from_column_slice(beta);
    Ok(core.laplace(&theta.lambdas(), &b)?.deviance)
}

fn ks_of(matrices: &ModelMatrices) -> Vec<usize> {
    matrices.z.factors.iter().map(|f| f.k).collect()
}

struct OptimizedTheta {
    flat_folded: Vec<f64>,
    evals: u64,
    tol_reached: bool,
}

/// Zeroes diagonals that wander in a flat region near zero: the boundary
/// point is the same optimum, and the exact-zero representative makes
/// singular fits recognizable downstream.
fn snap_boundary<F: FnMut(&[f64]) -> f64>(
    objective_folded: &mut F,
    folded: &mut Vec<f64>,
    best_f: &mut f64,
    diag_idx: &[usize],
    evals: &mut u64,
) {
    for &d in diag_idx {
        if folded[d] > 0.0 && folded[d] < BOUNDARY_SNAP_WINDOW {
            let mut trial = folded.clone();
            trial[d] = 0.0;
            let ft = objective_folded(&trial);
            *evals += 1;
            if ft.is_finite() && ft <= *best_f + 1e-8 * (1.0 + best_f.abs()) {
                *folded = trial;
                *best_f = ft;
            }
        }
    }
}

/// Per factor, the flat θ index of each column's diagonal together with the
/// flat indices of the off-diagonal entries below it.
fn theta_columns(ks: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut cols = Vec::new();
    let mut offset = 0;
    for &k in ks {
        for c in 0..k {
            let diag = offset + c * (c + 1) / 2 + c;
            let below: Vec<usize> =
                (c + 1..k).map(|i| offset + i * (i + 1) / 2 + c).collect();
            cols.push((diag, below));
        }
        offset += k * (k + 1) / 2;
    }
    cols
}

/// Runs folded Nelder-Mead with one restart, snaps near-zero diagonals to
/// the boundary, then checks each boundary column for a sign trap: with a
/// diagonal at zero, every covariance term through that column is pinned at
/// zero, and the basin where those covariances take the opposite sign is
/// only reachable by reopening the diagonal and flipping the column's
/// off-diagonals together, a move the simplex cannot make once it has
/// collapsed onto the boundary. Improving flip candidates get a short
/// polish run inside the same evaluation budget.
fn optimize_folded<F: FnMut(&[f64]) -> f64>(
    objective_folded: &mut F,
    x0: Vec<f64>,
    diag_idx: &[usize],
    ks: &[usize],
    tols: NmTols,
) -> OptimizedTheta {
    let first = nelder_mead(objective_folded, &x0, 0.5, MAX_EVALS_TOTAL / 2, tols);
    let budget_left = MAX_EVALS_TOTAL - first.evals.min(MAX_EVALS_TOTAL);
    let (mut best_x, mut best_f, mut evals, mut tol) =
        (first.x, first.fx, first.evals, first.tol_reached);
    if budget_left > 0 {
        let second = nelder_mead(objective_folded, &best_x, 0.5, budget_left, tols);
        evals += second.evals;
        if second.fx <= best_f {
            best_x = second.x;
            best_f = second.fx;
        }
        tol = second.tol_reached;
    }
    let mut folded = fold_diag(&best_x, diag_idx);
    snap_boundary(objective_folded, &mut folded, &mut best_f, diag_idx, &mut evals);

    let mut flip_best: Option<(Vec<f64>, f64)> = None;
    for (diag, below) in theta_columns(ks) {
        if folded[diag] > BOUNDARY_EPS || below.iter().all(|&o| folded[o] == 0.0) {
            continue;
        }
        for delta in [0.01, 0.05, 0.2] {
            let mut cand = folded.clone();
            cand[diag] = delta;
            for &o in &below {
                cand[o] = -cand[o];
            }
            let fc = objective_folded(&cand);
            evals += 1;
            let reference = flip_best.as_ref().map_or(best_f, |(_, f)| *f);
            if fc.is_finite() && fc < reference - 1e-8 * (1.0 + best_f.abs()) {
                flip_best = Some((cand, fc));
            }
        }
    }
    if let Some((cand, fc)) = flip_best {
        let budget = MAX_EVALS_TOTAL.saturating_sub(evals);
        if budget >= 100 {
            let polish = nelder_mead(objective_folded, &cand, 0.1, budget, tols);
            evals += polish.evals;
            let (px, pf) = if polish.fx <= fc { (polish.x, polish.fx) } else { (cand, fc) };
            if pf < best_f {
                folded = fold_diag(&px, diag_idx);
                best_f = pf;
                tol = tol && polish.tol_reached;
                snap_boundary(objective_folded, &mut folded, &mut best_f, diag_idx, &mut evals);
            }
        }
    }
    OptimizedTheta { flat_folded: folded, evals, tol_reached: tol }
}

/// Fits a gaussian mixed model by profiled REML on the standardized response.
pub fn fit_lmm(matrices: &ModelMatrices, y: &[f64]) -> Result<FitOutcome> {
    let start = Instant::now();
    let (ys, _, _) = standardize_response(y)?;
    let core = PlsCore::new(matrices, &ys)?;
    let ks = ks_of(matrices);
    let theta0 = ThetaParam::identity(&ks);
    let diag_idx = theta0.diag_indices();
    let n_theta = theta0.n_params();
    let n_params = n_theta + core.p + 1;
    if n_params > core.n {
        return Err(Error::InvalidParameter(format!(
            "unidentifiable: {} parameters for {} observations",
            n_params, core.n
        )));
    }

    let mut objective_folded = |flat: &[f64]| -> f64 {
        let folded = fold_diag(flat, &diag_idx);
        match core.reml(&lambdas_from_flat(&ks, &folded)) {
            Ok(eval) => eval.criterion,
            Err(_) => f64::INFINITY,
        }
    };
    let opt = optimize_folded(&mut objective_folded, theta0.flat().to_vec(), &diag_idx, &ks, LMM_NM_TOLS);
    let theta_hat = opt.flat_folded;
    let final_eval = core.reml(&lambdas_from_flat(&ks, &theta_hat))?;
    let optimizer_ok = opt.tol_reached && final_eval.criterion.is_finite();

    // Convergence is judged on the gradient of the raw (unfolded) criterion;
    // it extends smoothly across the diagonal boundary because ΛΛᵀ stays PSD.
    let mut raw = |flat: &[f64]| -> Option<f64> {
        core.reml(&lambdas_from_flat(&ks, flat))
            .ok()
            .map(|e| e.criterion)
    };
    let max_grad = max_abs_fd_gradient(&mut raw, &theta_hat);

    let sigma_eps = final_eval.sigma2.sqrt();
    let lambdas = lambdas_from_flat(&ks, &theta_hat);
    let factors: Vec<FactorEstimates> = lambdas
        .iter()
        .map(|lam| FactorEstimates::from_chol(lam * sigma_eps))
        .collect();
    let boundary = diag_idx.iter().any(|&d| theta_hat[d] <= BOUNDARY_EPS);
    let psd_ok = FitOutcome::check_psd(&factors);
    Ok(FitOutcome {
        family: Family::Gaussian,
        beta_hat: final_eval.beta.iter().copied().collect(),
        factors,
        sigma_eps_hat: Some(sigma_eps),
        objective: final_eval.criterion,
        max_grad,
        psd_ok,
        boundary,
        optimizer_ok,
        iterations: opt.evals,
        n_obs: core.n,
        n_params,
        wall_time: start.elapsed().as_secs_f64(),
        theta_hat,
    })
}

fn validate_binary(y: &[f64]) -> Result<()> {
    let mut ones = 0usize;
    for &v in y {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidParameter(format!(
                "Bernoulli response must be 0 or 1, got {v}"
            )));
        }
        if v == 1.0 {
            ones += 1;
        }
    }
    if ones == 0 || ones == y.len() {
        return Err(Error::DegenerateLikelihood(
            "single-class Bernoulli response".into(),
        ));
    }
    Ok(())
}

/// Fits a Bernoulli mixed model by minimizing the Laplace-approximated
/// deviance jointly over (θ, β).
pub fn fit_glmm_logistic(matrices: &ModelMatrices, y: &[f64]) -> Result<FitOutcome> {
    let start = Instant::now();
    validate_binary(y)?;
    let core = PlsCore::new(matrices, y)?;
    let ks = ks_of(matrices);
    let theta0 = ThetaParam::identity(&ks);
    let n_theta = theta0.n_params();
    let p = core.p;
    let n_params = n_theta + p;
    if n_params > core.n {
        return Err(Error::InvalidParameter(format!(
            "unidentifiable: {} parameters for {} observations",
            n_params, core.n
        )));
    }
    let diag_idx = theta0.diag_indices();
    let beta0 = match fit_glm_logistic(&matrices.x, y) {
        Ok(glm) => glm.beta,
        Err(_) => vec![0.0; p], // separated or singular GLM: start from zero
    };
    let mut x0 = theta0.flat().to_vec();
    x0.extend_from_slice(&beta0);

    let split = n_theta;
    let mut objective_folded = |xs: &[f64]| -> f64 {
        let folded = fold_diag(&xs[..split], &diag_idx);
        let beta = DVector::from_column_slice(&xs[split..]);
        match core.laplace(&lambdas_from_flat(&ks, &folded), &beta) {
            Ok(eval) => eval.deviance,
            Err(_) => f64::INFINITY,
        }
    };
    let opt = optimize_folded(&mut objective_folded, x0, &diag_idx, &ks, GLMM_NM_TOLS);
    let theta_hat = opt.flat_folded[..split].to_vec();
    let beta_hat = DVector::from_column_slice(&opt.flat_folded[split..]);
    let lambdas = lambdas_from_flat(&ks, &theta_hat);
    let final_eval = core.laplace(&lambdas, &beta_hat)?;
    let max_eta = final_eval.eta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let separated = max_eta > GLMM_SEPARATION_ETA
        || beta_hat.iter().any(|b| b.abs() > GLMM_SEPARATION_ETA);
    let optimizer_ok = opt.tol_reached
        && final_eval.deviance.is_finite()
        && final_eval.pirls_converged
        && !separated;

    let mut raw = |xs: &[f64]| -> Option<f64> {
        let beta = DVector::from_column_slice(&xs[split..]);
        core.laplace(&lambdas_from_flat(&ks, &xs[..split]), &beta)
            .ok()
            .map(|e| e.deviance)
    };
    let mut full = theta_hat.clone();
    full.extend(beta_hat.iter().copied());
    let max_grad = max_abs_fd_gradient(&mut raw, &full);

    let factors: Vec<FactorEstimates> = lambdas
        .iter()
        .map(|lam| FactorEstimates::from_chol(lam.clone()))
        .collect();
    let boundary = diag_idx.iter().any(|&d| theta_hat[d] <= BOUNDARY_EPS);
    let psd_ok = FitOutcome::check_psd(&factors);
    Ok(FitOutcome {
        family: Family::Logistic,
        beta_hat: beta_hat.iter().copied().collect(),
        factors,
        sigma_eps_hat: None,
        objective: final_eval.deviance,
        max_grad,
        psd_ok,
        boundary,
        optimizer_ok,
        iterations: opt.evals,
        n_obs: core.n,
        n_params,
        wall_time: start.elapsed().as_secs_f64(),
        theta_hat,
    })
}

/// Plain logistic regression fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    /// Wald standard errors from the inverse Fisher information.
    pub se: Vec<f64>,
    pub deviance: f64,
    pub iterations: u32,
}

/// Maximum-likelihood logistic regression via iteratively reweighted least
/// squares. Separation (diverging log-odds, a knockout configuration) is an
/// error because no finite maximizer exists.
pub fn fit_glm_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::InvalidParameter(format!(
            "X has {n} rows but y has {} entries",
            y.len()
        )));
    }
    if n <= p {
        return Err(Error::InvalidParameter(format!(
            "need more observations ({n}) than coefficients ({p})"
        )));
    }
    validate_binary(y)?;
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    let mut dev = bernoulli_deviance(&(x * &beta), &yv);
    let mut iterations = 0u32;
    for _ in 0..100 {
        iterations += 1;
        let eta = x * &beta;
        let max_eta = eta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if max_eta > GLM_SEPARATION_ETA {
            return Err(Error::DegenerateLikelihood(
                "complete separation: fitted log-odds diverged (knockout)".into(),
            ));
        }
        let mut xw = x.clone();
        let mut score = DVector::zeros(p);
        for i in 0..n {
            let mu = logistic(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-12);
            for j in 0..p {
                xw[(i, j)] *= w;
            }
            let r = yv[i] - mu;
            for j in 0..p {
                score[j] += x[(i, j)] * r;
            }
        }
        let xtwx = x.tr_mul(&xw);
        let ch = Cholesky::new(xtwx).ok_or_else(|| {
            Error::Singular("Fisher information is singular (collinear columns)".into())
        })?;
        let delta = ch.solve(&score);
        // Step-halve on deviance increase.
        let mut step = 1.0;
        let (beta_new, dev_new) = loop {
            let b = &beta + &delta * step;
            let d = bernoulli_deviance(&(x * &b), &yv);
            if d <= dev + 1e-12 * (1.0 + dev) || step < 1e-6 {
                break (b, d);
            }
            step *= 0.5;
        };
        let done = (dev - dev_new).abs() < 1e-10 * (1.0 + dev_new);
        beta = beta_new;
        dev = dev_new;
        if done {
            let eta = x * &beta;
            let max_eta = eta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            if max_eta > GLM_SEPARATION_ETA {
                return Err(Error::DegenerateLikelihood(
                    "complete separation: fitted log-odds diverged (knockout)".into(),
                ));
            }
            let info_inv = ch.inverse();
            let se = (0..p).map(|j| info_inv[(j, j)].sqrt()).collect();
            return Ok(GlmFit {
                beta: beta.iter().copied().collect(),
                se,
                deviance: dev,
                iterations,
            });
        }
    }
    Err(Error::IterationFailure(
        "logistic regression did not converge in 100 iterations".into(),
    ))
}

fn bernoulli_deviance(eta: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        let sign = 2.0 * y[i] - 1.0;
        dev += 2.0 * softplus(-sign * eta[i]);
    }
    dev
}
