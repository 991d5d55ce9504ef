//! Seedable sampling primitives for the simulation procedures.
//!
//! Every stochastic routine in the toolkit draws from an [`RngStream`],
//! a counter-based generator addressed by `(seed, stream_id)`. Giving
//! each simulation its own `stream_id` makes runs reproducible under any
//! parallel schedule: a stream never depends on what other streams drew.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Identical addresses yield identical draw sequences across runs and
/// platforms; distinct `stream_id`s yield independent sequences. The
/// stream is single-owner: parallel code hands each task its own stream
/// instead of sharing one.
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream at `stream_id + offset` under the same seed.
    /// Used to hand sub-procedures (e.g. sampler chains) their own streams.
    pub fn substream(&self, offset: u64) -> RngStream {
        RngStream::new(self.seed, self.stream_id.wrapping_add(offset))
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on {lo, ..., hi} inclusive.
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> u64 {
        self.rng.gen_range(lo..=hi)
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Categorical draw over `probs` (assumed to sum to 1); returns an index.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Cholesky factor L of a correlation matrix: lower triangular, unit row
/// norms, strictly positive diagonal, so LLᵀ is a valid correlation matrix.
#[derive(Debug, Clone)]
pub struct CholeskyCorrelation {
    l: DMatrix<f64>,
}

impl CholeskyCorrelation {
    /// Validates and wraps a lower-triangular factor.
    pub fn new(l: DMatrix<f64>) -> Result<Self> {
        if l.nrows() != l.ncols() || l.nrows() == 0 {
            return Err(Error::InvalidParameter(format!(
                "correlation Cholesky factor must be square and non-empty, got {}x{}",
                l.nrows(),
                l.ncols()
            )));
        }
        let d = l.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                if l[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(
                        "correlation Cholesky factor must be lower triangular".into(),
                    ));
                }
            }
            if l[(i, i)] <= 0.0 {
                return Err(Error::InvalidParameter(
                    "correlation Cholesky factor needs a strictly positive diagonal".into(),
                ));
            }
            let row_norm2: f64 = (0..=i).map(|j| l[(i, j)] * l[(i, j)]).sum();
            if (row_norm2 - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "correlation Cholesky factor row {i} has squared norm {row_norm2}, expected 1"
                )));
            }
        }
        Ok(Self { l })
    }

    /// 2×2 factor for a single correlation ρ ∈ (−1, 1).
    pub fn from_rho(rho: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) || rho.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "correlation must lie strictly inside (-1, 1), got {rho}"
            )));
        }
        let mut l = DMatrix::zeros(2, 2);
        l[(0, 0)] = 1.0;
        l[(1, 0)] = rho;
        l[(1, 1)] = (1.0 - rho * rho).sqrt();
        Self::new(l)
    }

    pub fn identity(dim: usize) -> Self {
        Self { l: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// The implied correlation matrix LLᵀ.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Correlation entry (i, j) of LLᵀ: the dot product of rows i and j.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..=i.min(j) {
            acc += self.l[(i, c)] * self.l[(j, c)];
        }
        acc
    }
}

/// Draws from Dirichlet(alpha) by normalizing independent Gamma(αᵢ, 1) draws.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if alpha.len() < 2 {
        return Err(Error::InvalidParameter(
            "Dirichlet needs at least two concentration parameters".into(),
        ));
    }
    if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidParameter(
            "Dirichlet concentration parameters must be positive and finite".into(),
        ));
    }
    // The Gamma draws are almost surely positive; a zero sum can only arise
    // from floating-point underflow at tiny alpha, so redraw a few times.
    for _ in 0..100 {
        let mut g: Vec<f64> = Vec::with_capacity(alpha.len());
        for &a in alpha {
            let dist = Gamma::new(a, 1.0)
                .map_err(|e| Error::InvalidParameter(format!("Gamma({a}, 1): {e}")))?;
            g.push(dist.sample(rng));
        }
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            for v in &mut g {
                *v /= s;
            }
            return Ok(g);
        }
    }
    Err(Error::IterationFailure(
        "Dirichlet sampling underflowed repeatedly; alpha too small".into(),
    ))
}

/// Draws the Cholesky factor of a correlation matrix from LKJ(eta) using
/// the onion method: each new row extends the factor with a Beta-distributed
/// squared radius and a uniform direction, so no rejection step is needed.
pub fn sample_lkj_cholesky(dim: usize, eta: f64, rng: &mut RngStream) -> Result<CholeskyCorrelation> {
    if dim == 0 {
        return Err(Error::InvalidParameter("LKJ dimension must be at least 1".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!("LKJ shape must be positive, got {eta}")));
    }
    let mut l = DMatrix::zeros(dim, dim);
    l[(0, 0)] = 1.0;
    if dim == 1 {
        return CholeskyCorrelation::new(l);
    }

    // Row 1: a single canonical correlation r = 2·Beta(b, b) − 1 with
    // b = eta + (dim − 2)/2; in 2-d and eta = 1 this makes r uniform.
    let mut b = eta + (dim as f64 - 2.0) / 2.0;
    let beta = Beta::new(b, b).map_err(|e| Error::InvalidParameter(format!("Beta({b}, {b}): {e}")))?;
    let r = 2.0 * clamp_open_unit(beta.sample(rng)) - 1.0;
    l[(1, 0)] = r;
    l[(1, 1)] = (1.0 - r * r).sqrt();

    // Row m ≥ 2: squared radius y ~ Beta(m/2, b), direction uniform on the
    // unit (m−1)-sphere; the diagonal sqrt(1 − y) keeps the row at norm 1.
    for m in 2..dim {
        b -= 0.5;
        let beta = Beta::new(m as f64 / 2.0, b)
            .map_err(|e| Error::InvalidParameter(format!("Beta({}, {b}): {e}", m as f64 / 2.0)))?;
        let y = clamp_open_unit(beta.sample(rng));
        let dir = unit_vector(m, rng);
        let radius = y.sqrt();
        for j in 0..m {
            l[(m, j)] = radius * dir[j];
        }
        l[(m, m)] = (1.0 - y).sqrt();
    }
    CholeskyCorrelation::new(l)
}

/// Keeps a Beta draw strictly inside (0, 1) so downstream square roots
/// stay positive; the clamp only moves exact floating-point endpoints.
fn clamp_open_unit(x: f64) -> f64 {
    x.clamp(1e-15, 1.0 - 1e-15)
}

fn unit_vector(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-100 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws from MN(mu, scale·scaleᵀ) as mu + scale·z with z standard normal.
pub fn sample_mvnormal(
    mu: &DVector<f64>,
    scale: &DMatrix<f64>,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    if scale.nrows() != scale.ncols() || scale.nrows() != mu.len() {
        return Err(Error::InvalidParameter(format!(
            "mvnormal dimension mismatch: mu has {} entries, scale is {}x{}",
            mu.len(),
            scale.nrows(),
            scale.ncols()
        )));
    }
    let z = DVector::from_fn(mu.len(), |_, _| rng.standard_normal());
    Ok(mu + scale * z)
}

/// Draws max{Poisson(lambda), 1} by CDF inversion.
///
/// Inversion is exact and deterministic per stream; it is fast for the
/// lambda range used here (the generators draw lambda from [20, 30]).
pub fn sample_poisson_min1(lambda: f64, rng: &mut RngStream) -> Result<u64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Poisson rate must be positive and finite, got {lambda}"
        )));
    }
    let u = rng.uniform();
    let mut p = (-lambda).exp();
    let mut f = p;
    let mut k: u64 = 0;
    // The cap is ~20 standard deviations above the mean; u < F(cap) always
    // holds in f64 well before this bound.
    let cap = (lambda + 20.0 * lambda.sqrt() + 200.0) as u64;
    while u > f && k < cap {
        k += 1;
        p *= lambda / k as f64;
        f += p;
    }
    Ok(k.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{ks_against, uniform_cdf};

    fn stream(id: u64) -> RngStream {
        RngStream::new(0xC0FFEE, id)
    }

    #[test]
    fn rng_stream_is_reproducible_and_streams_differ() {
        let a: Vec<f64> = {
            let mut r = RngStream::new(42, 7);
            (0..100).map(|_| r.uniform()).collect()
        };
        let b: Vec<f64> = {
            let mut r = RngStream::new(42, 7);
            (0..100).map(|_| r.uniform()).collect()
        };
        let c: Vec<f64> = {
            let mut r = RngStream::new(42, 8);
            (0..100).map(|_| r.uniform()).collect()
        };
        assert_eq!(a, b, "identical (seed, stream) must replay identically");
        assert_ne!(a, c, "distinct stream ids must decorrelate");
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut r = stream(1);
        for _ in 0..100 {
            let d = sample_dirichlet(&[1.0, 1.0, 1.0], &mut r).unwrap();
            let s: f64 = d.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "components must sum to 1, got {s}");
            assert!(d.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let mut r = stream(2);
        assert!(sample_dirichlet(&[1.0, 0.0], &mut r).is_err());
        assert!(sample_dirichlet(&[1.0, -2.0], &mut r).is_err());
        assert!(sample_dirichlet(&[1.0], &mut r).is_err());
    }

    #[test]
    fn dirichlet_uniform_marginal() {
        // Dirichlet(1,1) first component is Uniform(0,1).
        let mut r = stream(3);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_dirichlet(&[1.0, 1.0], &mut r).unwrap()[0])
            .collect();
        ks_against(&draws, |x| uniform_cdf(x, 0.0, 1.0), 0.001, "Dirichlet(1,1) marginal");
    }

    #[test]
    fn dirichlet_concentrates_at_mean() {
        let mut r = stream(4);
        let d = sample_dirichlet(&[1e6, 1e6], &mut r).unwrap();
        assert!((d[0] - 0.5).abs() < 0.01 && (d[1] - 0.5).abs() < 0.01, "got {d:?}");
    }

    #[test]
    fn lkj_dim1_is_unit() {
        let mut r = stream(5);
        let c = sample_lkj_cholesky(1, 1.0, &mut r).unwrap();
        assert_eq!(c.dim(), 1);
        assert_eq!(c.factor()[(0, 0)], 1.0);
    }

    #[test]
    fn lkj_dim2_eta1_correlation_is_uniform() {
        let mut r = stream(6);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_lkj_cholesky(2, 1.0, &mut r).unwrap().correlation(1, 0))
            .collect();
        ks_against(&draws, |x| uniform_cdf(x, -1.0, 1.0), 0.001, "LKJ(1) 2-d correlation");
    }

    #[test]
    fn lkj_dim2_eta2_correlation_matches_shifted_beta() {
        // In 2-d, LKJ(2) puts 2·Beta(2,2) − 1 on the correlation;
        // Beta(2,2) has closed-form CDF 3u² − 2u³.
        let mut r = stream(7);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_lkj_cholesky(2, 2.0, &mut r).unwrap().correlation(1, 0))
            .collect();
        let cdf = |x: f64| {
            let u = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
            3.0 * u * u - 2.0 * u * u * u
        };
        ks_against(&draws, cdf, 0.001, "LKJ(2) 2-d correlation");
    }

    #[test]
    fn lkj_factors_are_valid_correlation_factors() {
        let mut r = stream(8);
        for dim in 1..=6 {
            for _ in 0..200 {
                let c = sample_lkj_cholesky(dim, 1.0, &mut r).unwrap();
                let m = c.matrix();
                for i in 0..dim {
                    assert!((m[(i, i)] - 1.0).abs() < 1e-12, "unit diagonal");
                }
                let eig = m.symmetric_eigenvalues();
                assert!(eig.iter().all(|&e| e >= -1e-10), "PSD: eigenvalues {eig:?}");
            }
        }
    }

    #[test]
    fn lkj_rejects_bad_parameters() {
        let mut r = stream(9);
        assert!(sample_lkj_cholesky(0, 1.0, &mut r).is_err());
        assert!(sample_lkj_cholesky(3, 0.0, &mut r).is_err());
        assert!(sample_lkj_cholesky(3, -1.0, &mut r).is_err());
    }

    #[test]
    fn mvnormal_degenerate_returns_mean() {
        let mut r = stream(10);
        let mu = DVector::from_vec(vec![1.5, -2.0]);
        let draw = sample_mvnormal(&mu, &DMatrix::zeros(2, 2), &mut r).unwrap();
        assert_eq!(draw, mu);
    }

    #[test]
    fn mvnormal_mean_recovery() {
        let mut r = stream(11);
        let mu = DVector::zeros(4);
        let scale = DMatrix::identity(4, 4);
        let mut sums = [0.0; 4];
        let n = 100_000;
        for _ in 0..n {
            let d = sample_mvnormal(&mu, &scale, &mut r).unwrap();
            for i in 0..4 {
                sums[i] += d[i];
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mean = s / n as f64;
            assert!(mean.abs() < 0.02, "component {i} mean {mean}");
        }
    }

    #[test]
    fn mvnormal_correlation_recovery() {
        let mut r = stream(12);
        let rho = 0.5;
        let scale = CholeskyCorrelation::from_rho(rho).unwrap().factor().clone();
        let mu = DVector::zeros(2);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        let n = 100_000;
        for _ in 0..n {
            let d = sample_mvnormal(&mu, &scale, &mut r).unwrap();
            sxy += d[0] * d[1];
            sxx += d[0] * d[0];
            syy += d[1] * d[1];
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!((corr - rho).abs() < 0.02, "empirical correlation {corr}");
    }

    #[test]
    fn mvnormal_rejects_dimension_mismatch() {
        let mut r = stream(13);
        let mu = DVector::zeros(3);
        assert!(sample_mvnormal(&mu, &DMatrix::zeros(2, 2), &mut r).is_err());
    }

    #[test]
    fn poisson_min1_floors_at_one() {
        let mut r = stream(14);
        for _ in 0..1000 {
            assert_eq!(sample_poisson_min1(0.001, &mut r).unwrap(), 1);
        }
    }

    #[test]
    fn poisson_min1_mean_at_lambda_25() {
        let mut r = stream(15);
        let n = 100_000;
        let total: u64 = (0..n).map(|_| sample_poisson_min1(25.0, &mut r).unwrap()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 25.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn poisson_min1_rejects_nonpositive_lambda() {
        let mut r = stream(16);
        assert!(sample_poisson_min1(0.0, &mut r).is_err());
        assert!(sample_poisson_min1(-3.0, &mut r).is_err());
    }

    #[test]
    fn cholesky_correlation_validation() {
        assert!(CholeskyCorrelation::new(DMatrix::zeros(0, 0)).is_err());
        // Upper-triangular garbage rejected.
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 1)] = 0.3;
        assert!(CholeskyCorrelation::new(bad).is_err());
        // Row norm off rejected.
        let mut bad = DMatrix::identity(2, 2);
        bad[(1, 0)] = 0.5;
        assert!(CholeskyCorrelation::new(bad).is_err());
        // Valid 2x2 accepted and reconstructs rho.
        let c = CholeskyCorrelation::from_rho(-0.8).unwrap();
        assert!((c.correlation(1, 0) + 0.8).abs() < 1e-12);
        assert!((c.matrix()[(1, 1)] - 1.0).abs() < 1e-12);
    }
}
