//! Aggregation of simulation records into result tables and CSV exports.
//!
//! Every table is a pure fold over records: evaluating the fold on
//! concatenated batches gives exactly the sum of the per-batch counts, and
//! replaying the same file always reproduces the same table. Frequentist
//! convergence is re-derived from the recorded classification ingredients,
//! so one experiment can be tabulated under any gradient tolerance after
//! the fact; Bayesian convergence is fixed at record time (divergences and
//! split-R̂ do not depend on a tolerance choice).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diagnostics::{classify_convergence_parts, RankKind};
use crate::error::{Error, Result};
use crate::freqfit::fit_glm_logistic;
use crate::runner::{DesignKind, SimRecord};
use crate::truemodel::Family;

/// Which fitting pipeline a table row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    Frequentist,
    Bayesian,
}

fn fitter_label(f: Fitter) -> &'static str {
    match f {
        Fitter::Frequentist => "frequentist",
        Fitter::Bayesian => "bayesian",
    }
}

fn design_label(d: DesignKind) -> &'static str {
    match d {
        DesignKind::Simple => "simple",
        DesignKind::Complex => "complex",
    }
}

fn family_label(f: Family) -> &'static str {
    match f {
        Family::Gaussian => "gaussian",
        Family::Logistic => "logistic",
    }
}

/// Convergence of the frequentist fit in a record, re-classified at `tol`;
/// None when the fit was skipped.
fn freq_converged(rec: &SimRecord, tol: f64) -> Option<bool> {
    rec.freq
        .as_ref()
        .map(|f| classify_convergence_parts(&f.parts, tol).converged)
}

fn bayes_converged(rec: &SimRecord) -> Option<bool> {
    rec.bayes.as_ref().map(|b| b.converged)
}

// ---------------------------------------------------------------------------
// Non-convergence rates
// ---------------------------------------------------------------------------

/// One (design, family, fitter) cell of the rates table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub design: DesignKind,
    pub family: Family,
    pub fitter: Fitter,
    pub n: usize,
    pub n_unconverged: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesTable {
    pub rows: Vec<RateRow>,
}

impl RatesTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("design,family,fitter,n,n_unconverged,rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                design_label(r.design),
                family_label(r.family),
                fitter_label(r.fitter),
                r.n,
                r.n_unconverged,
                r.rate
            ));
        }
        out
    }

    /// Rate for one cell, if present.
    pub fn rate(&self, design: DesignKind, family: Family, fitter: Fitter) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.design == design && r.family == family && r.fitter == fitter)
            .map(|r| r.rate)
    }
}

/// Non-convergence proportion per (design, family, fitter). Frequentist
/// fits are labeled at `tol`; rows appear in a fixed sorted order.
pub fn nonconvergence_rates(records: &[SimRecord], tol: f64) -> Result<RatesTable> {
    if records.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot tabulate rates over zero records".into(),
        ));
    }
    let mut cells: BTreeMap<(u8, u8, u8), (usize, usize)> = BTreeMap::new();
    let mut keys: BTreeMap<(u8, u8, u8), (DesignKind, Family, Fitter)> = BTreeMap::new();
    let mut bump = |design: DesignKind, family: Family, fitter: Fitter, unconverged: bool| {
        let key = (design as u8, family as u8, fitter as u8);
        keys.entry(key).or_insert((design, family, fitter));
        let cell = cells.entry(key).or_insert((0, 0));
        cell.0 += 1;
        if unconverged {
            cell.1 += 1;
        }
    };
    for rec in records {
        if let Some(conv) = freq_converged(rec, tol) {
            bump(rec.design, rec.family, Fitter::Frequentist, !conv);
        }
        if let Some(conv) = bayes_converged(rec) {
            bump(rec.design, rec.family, Fitter::Bayesian, !conv);
        }
    }
    let rows = cells
        .into_iter()
        .map(|(key, (n, bad))| {
            let (design, family, fitter) = keys[&key];
            RateRow {
                design,
                family,
                fitter,
                n,
                n_unconverged: bad,
                rate: bad as f64 / n as f64,
            }
        })
        .collect();
    Ok(RatesTable { rows })
}

// ---------------------------------------------------------------------------
// Rank deficiency
// ---------------------------------------------------------------------------

/// Counts of full vs deficient random-effects covariance estimates among
/// converged frequentist fits, by family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    pub gaussian_full: usize,
    pub gaussian_deficient: usize,
    pub logistic_full: usize,
    pub logistic_deficient: usize,
}

impl RankTable {
    pub fn to_csv(&self) -> String {
        format!(
            "family,full_rank,rank_deficient\ngaussian,{},{}\nlogistic,{},{}\n",
            self.gaussian_full, self.gaussian_deficient, self.logistic_full, self.logistic_deficient
        )
    }

    pub fn deficient_share(&self, family: Family) -> Option<f64> {
        let (full, def) = match family {
            Family::Gaussian => (self.gaussian_full, self.gaussian_deficient),
            Family::Logistic => (self.logistic_full, self.logistic_deficient),
        };
        let n = full + def;
        (n > 0).then(|| def as f64 / n as f64)
    }
}

/// The 2×2 family × rank table over converged frequentist fits (rank
/// analysis is meaningless for unconverged fits, which are excluded).
pub fn rank_deficiency_table(records: &[SimRecord], tol: f64) -> RankTable {
    let mut table = RankTable {
        gaussian_full: 0,
        gaussian_deficient: 0,
        logistic_full: 0,
        logistic_deficient: 0,
    };
    for rec in records {
        if freq_converged(rec, tol) != Some(true) {
            continue;
        }
        let Some(rank) = rec.freq.as_ref().and_then(|f| f.rank) else {
            continue;
        };
        let slot = match (rec.family, rank.status) {
            (Family::Gaussian, RankKind::Full) => &mut table.gaussian_full,
            (Family::Gaussian, RankKind::Deficient) => &mut table.gaussian_deficient,
            (Family::Logistic, RankKind::Full) => &mut table.logistic_full,
            (Family::Logistic, RankKind::Deficient) => &mut table.logistic_deficient,
        };
        *slot += 1;
    }
    table
}

// ---------------------------------------------------------------------------
// Rank logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRegressionTerm {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Logistic regression of rank deficiency on model descriptors, over
/// converged frequentist fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRegressionResult {
    pub terms: Vec<RankRegressionTerm>,
    pub n: usize,
}

impl RankRegressionResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,estimate,se,z,p\n");
        for t in &self.terms {
            out.push_str(&format!("{},{},{},{},{}\n", t.name, t.estimate, t.se, t.z, t.p));
        }
        out
    }

    pub fn term(&self, name: &str) -> Option<&RankRegressionTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// z-scores a column to mean 0, SD 1 (sample SD, n−1).
fn zscore(xs: &[f64]) -> Result<Vec<f64>> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateLikelihood(
            "cannot z-score a constant predictor column".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(xs.iter().map(|x| (x - mean) / sd).collect())
}

/// Regresses rank deficiency (deficient = 1) on a family indicator
/// (logistic = 1) and z-scored min_variance, balance, and
/// total_correlation, over converged frequentist fits that carry a balance
/// (complex-design records). Separation or a one-sided response is an
/// error.
pub fn rank_logistic_regression(records: &[SimRecord], tol: f64) -> Result<RankRegressionResult> {
    let mut y = Vec::new();
    let mut fam = Vec::new();
    let mut mv = Vec::new();
    let mut bal = Vec::new();
    let mut tc = Vec::new();
    for rec in records {
        if freq_converged(rec, tol) != Some(true) {
            continue;
        }
        let (Some(rank), Some(b)) = (rec.freq.as_ref().and_then(|f| f.rank), rec.balance) else {
            continue;
        };
        y.push(match rank.status {
            RankKind::Deficient => 1.0,
            RankKind::Full => 0.0,
        });
        fam.push(match rec.family {
            Family::Logistic => 1.0,
            Family::Gaussian => 0.0,
        });
        mv.push(rec.min_variance);
        bal.push(b);
        tc.push(rec.total_correlation);
    }
    let n = y.len();
    if n < 2 || !y.contains(&0.0) || !y.contains(&1.0) {
        return Err(Error::InvalidParameter(format!(
            "rank regression needs at least two converged fits with both rank outcomes, got {n}"
        )));
    }
    let mv = zscore(&mv)?;
    let bal = zscore(&bal)?;
    let tc = zscore(&tc)?;
    let mut x = DMatrix::zeros(n, 5);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = fam[i];
        x[(i, 2)] = mv[i];
        x[(i, 3)] = bal[i];
        x[(i, 4)] = tc[i];
    }
    let fit = fit_glm_logistic(&x, &y)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let names = [
        "intercept",
        "family_logistic",
        "min_variance_scaled",
        "balance_scaled",
        "total_correlation_scaled",
    ];
    let terms = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let estimate = fit.beta[j];
            let se = fit.se[j];
            let z = estimate / se;
            RankRegressionTerm {
                name: name.to_string(),
                estimate,
                se,
                z,
                p: 2.0 * (1.0 - normal.cdf(z.abs())),
            }
        })
        .collect();
    Ok(RankRegressionResult { terms, n })
}

// ---------------------------------------------------------------------------
// Error by balance
// ---------------------------------------------------------------------------

/// Parameter grouping for error summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    FixedEffects,
    RandomSd,
    Correlation,
    ResidualSd,
}

fn class_label(c: ParamClass) -> &'static str {
    match c {
        ParamClass::FixedEffects => "fixed_effects",
        ParamClass::RandomSd => "random_sd",
        ParamClass::Correlation => "correlation",
        ParamClass::ResidualSd => "residual_sd",
    }
}

/// One (balance bin, family, fitter, parameter class) summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceBinRow {
    pub bin: usize,
    /// Bin covers (lo, hi].
    pub lo: f64,
    pub hi: f64,
    pub midpoint: f64,
    pub family: Family,
    pub fitter: Fitter,
    pub class: ParamClass,
    /// Fits of this fitter landing in the bin.
    pub n: usize,
    /// Mean over fits of the within-fit mean squared error for the class;
    /// None when no fit in the bin produced errors for the class.
    pub mean_squared_error: Option<f64>,
    /// Share of fits in the bin labeled unconverged; None for an empty bin.
    pub nonconvergence: Option<f64>,
}

pub fn balance_rows_to_csv(rows: &[BalanceBinRow]) -> String {
    let mut out = String::from(
        "bin,lo,hi,midpoint,family,fitter,class,n,mean_squared_error,nonconvergence\n",
    );
    for r in rows {
        let mse = r.mean_squared_error.map(|v| v.to_string()).unwrap_or_default();
        let nc = r.nonconvergence.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.bin,
            r.lo,
            r.hi,
            r.midpoint,
            family_label(r.family),
            fitter_label(r.fitter),
            class_label(r.class),
            r.n,
            mse,
            nc
        ));
    }
    out
}

/// Per-class mean of one fit's squared errors; None when the class is empty
/// for this model shape.
fn class_mean(errors: &crate::diagnostics::ParameterErrors, class: ParamClass) -> Option<f64> {
    let vals: Vec<f64> = match class {
        ParamClass::FixedEffects => errors.beta.clone(),
        ParamClass::RandomSd => errors.factors.iter().flat_map(|f| f.sigma.clone()).collect(),
        ParamClass::Correlation => {
            errors.factors.iter().flat_map(|f| f.omega_lower.clone()).collect()
        }
        ParamClass::ResidualSd => errors.sigma_eps.into_iter().collect(),
    };
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Bin index for a balance value in (0,1] over `n_bins` equal-width bins.
fn balance_bin(b: f64, n_bins: usize) -> usize {
    ((b * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1
}

/// Binned error and non-convergence summaries over balance. All fits with
/// estimates contribute to the error means, converged or not; records
/// without a balance value (simple designs) are skipped. Every bin is
/// emitted for every (family, fitter, class) combination observed, empty
/// bins with null means.
pub fn error_by_balance(
    records: &[SimRecord],
    n_bins: usize,
    tol: f64,
) -> Result<Vec<BalanceBinRow>> {
    if n_bins < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 balance bins, got {n_bins}"
        )));
    }
    struct Acc {
        n: usize,
        unconverged: usize,
        sums: BTreeMap<ParamClass, (f64, usize)>,
    }
    let mut cells: BTreeMap<(u8, u8, usize), Acc> = BTreeMap::new();
    let mut combos: BTreeMap<(u8, u8), (Family, Fitter)> = BTreeMap::new();
    for rec in records {
        let Some(b) = rec.balance else { continue };
        let bin = balance_bin(b, n_bins);
        let mut visit =
            |fitter: Fitter,
             unconverged: bool,
             errors: Option<&crate::diagnostics::ParameterErrors>| {
                combos
                    .entry((rec.family as u8, fitter as u8))
                    .or_insert((rec.family, fitter));
                let acc = cells
                    .entry((rec.family as u8, fitter as u8, bin))
                    .or_insert_with(|| Acc { n: 0, unconverged: 0, sums: BTreeMap::new() });
                acc.n += 1;
                if unconverged {
                    acc.unconverged += 1;
                }
                if let Some(err) = errors {
                    for class in [
                        ParamClass::FixedEffects,
                        ParamClass::RandomSd,
                        ParamClass::Correlation,
                        ParamClass::ResidualSd,
                    ] {
                        if let Some(m) = class_mean(err, class) {
                            let slot = acc.sums.entry(class).or_insert((0.0, 0));
                            slot.0 += m;
                            slot.1 += 1;
                        }
                    }
                }
            };
        if let Some(conv) = freq_converged(rec, tol) {
            visit(
                Fitter::Frequentist,
                !conv,
                rec.freq.as_ref().and_then(|f| f.squared_errors.as_ref()),
            );
        }
        if let Some(conv) = bayes_converged(rec) {
            visit(
                Fitter::Bayesian,
                !conv,
                rec.bayes.as_ref().and_then(|b| b.squared_errors.as_ref()),
            );
        }
    }
    let mut rows = Vec::new();
    let width = 1.0 / n_bins as f64;
    for (&(fk, tk), &(family, fitter)) in &combos {
        for bin in 0..n_bins {
            let lo = bin as f64 * width;
            let hi = (bin + 1) as f64 * width;
            let acc = cells.get(&(fk, tk, bin));
            for class in [
                ParamClass::FixedEffects,
                ParamClass::RandomSd,
                ParamClass::Correlation,
                ParamClass::ResidualSd,
            ] {
                let (n, mse, nc) = match acc {
                    Some(a) => (
                        a.n,
                        a.sums.get(&class).map(|(s, c)| s / *c as f64),
                        Some(a.unconverged as f64 / a.n as f64),
                    ),
                    None => (0, None, None),
                };
                rows.push(BalanceBinRow {
                    bin,
                    lo,
                    hi,
                    midpoint: (lo + hi) / 2.0,
                    family,
                    fitter,
                    class,
                    n,
                    mean_squared_error: mse,
                    nonconvergence: nc,
                });
            }
        }
    }
    Ok(rows)
}
