//! Shared statistical assertions for unit tests.

/// One-sample Kolmogorov–Smirnov test against a known CDF; panics if the
/// statistic exceeds the asymptotic critical value at `alpha`.
pub fn ks_against<F: Fn(f64) -> f64>(sample: &[f64], cdf: F, alpha: f64, label: &str) {
    let n = sample.len();
    assert!(n > 0, "{label}: empty sample");
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n as f64);
        d = d.max((i + 1) as f64 / n as f64 - f);
    }
    // Kolmogorov asymptotic critical value: sqrt(ln(2/alpha) / (2n)).
    let crit = ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt();
    assert!(
        d <= crit,
        "{label}: KS statistic {d:.5} exceeds critical value {crit:.5} at level {alpha}"
    );
}

pub fn uniform_cdf(x: f64, lo: f64, hi: f64) -> f64 {
    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Standard normal CDF via `erfc`-free Hart-style rational approximation;
/// absolute error below 1e-7, ample for Monte Carlo goodness-of-fit.
pub fn std_normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.2316419 * x.abs());
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let upper = pdf * poly;
    if x >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}
