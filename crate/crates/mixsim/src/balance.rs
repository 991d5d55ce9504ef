//! Dataset balance measure B ∈ (0,1] computed from the Subject × x1 × x2
//! contingency table.
//!
//! Each non-empty cell contributes a ratio r_c = max{n_c/n*, n*/n_c}
//! against the mean non-empty count n*; the overall imbalance ratio is
//! r = C/(C*)² · Σ r_c and the balance measure is B = 2[1 − r/(1+r)],
//! which is 1 exactly for equal positive counts in every cell and falls
//! toward 0 as cells empty out or counts spread.

use serde::{Deserialize, Serialize};

use crate::design::{Dataset, X1Level, X2Level};
use crate::error::{Error, Result};

/// A cross-classification count table. The shipped experiments always
/// cross Subject × x1 × x2, but the measure itself only needs cells.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// Extent of each crossed factor (e.g. [S, 2, 3]).
    pub dims: Vec<usize>,
    /// Row-major counts; length is the product of `dims`.
    pub counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn from_counts(dims: Vec<usize>, counts: Vec<u64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || expect == 0 || counts.len() != expect {
            return Err(Error::InvalidParameter(format!(
                "contingency table needs positive dims with matching cell count, got dims {dims:?} and {} cells",
                counts.len()
            )));
        }
        Ok(Self { dims, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Balance diagnostics for one table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceSummary {
    /// Total cell count C.
    pub c: usize,
    /// Non-empty cell count C*.
    pub c_star: usize,
    /// Mean count over non-empty cells, n* = n / C*.
    pub n_star: f64,
    /// Overall imbalance ratio r ≥ 1.
    pub r: f64,
    /// Balance measure B = 2[1 − r/(1+r)] ∈ (0, 1].
    pub b: f64,
}

/// Counts the Subject × x1 × x2 table (S×2×3 cells) of a complex-design
/// dataset. The measure is undefined without the three-level factor.
pub fn contingency_counts(ds: &Dataset) -> Result<ContingencyTable> {
    let x2 = ds
        .x2
        .as_ref()
        .ok_or_else(|| Error::Undefined("balance needs the x2 factor (complex design)".into()))?;
    if ds.n() == 0 {
        return Err(Error::Undefined("balance needs a non-empty dataset".into()));
    }
    let s = ds.n_subjects;
    let mut counts = vec![0u64; s * 6];
    for i in 0..ds.n() {
        let i1 = match ds.x1[i] {
            X1Level::A => 0,
            X1Level::B => 1,
        };
        let i2 = match x2[i] {
            X2Level::A => 0,
            X2Level::B => 1,
            X2Level::C => 2,
        };
        counts[ds.subject[i] * 6 + i1 * 3 + i2] += 1;
    }
    ContingencyTable::from_counts(vec![s, 2, 3], counts)
}

/// Evaluates the imbalance ratio and balance measure of a table.
pub fn balance_measure(table: &ContingencyTable) -> Result<BalanceSummary> {
    let n = table.total();
    if n == 0 {
        return Err(Error::InvalidParameter("balance needs a positive table total".into()));
    }
    let c = table.counts.len();
    let c_star = table.counts.iter().filter(|&&x| x > 0).count();
    let n_star = n as f64 / c_star as f64;
    let ratio_sum: f64 = table
        .counts
        .iter()
        .filter(|&&x| x > 0)
        .map(|&x| {
            let rc = x as f64 / n_star;
            rc.max(1.0 / rc)
        })
        .sum();
    let r = c as f64 / (c_star as f64 * c_star as f64) * ratio_sum;
    let b = 2.0 * (1.0 - r / (1.0 + r));
    Ok(BalanceSummary { c, c_star, n_star, r, b })
}

/// Convenience: table construction plus measure in one call.
pub fn dataset_balance(ds: &Dataset) -> Result<BalanceSummary> {
    balance_measure(&contingency_counts(ds)?)
}
