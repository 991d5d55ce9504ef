//! Covariate and grouping-structure generation for simulated datasets,
//! plus construction of the fixed- and random-effects model matrices.
//!
//! Two designs are supported. The *simple* design is a fully crossed
//! subjects-by-items layout (24 subjects, 12 or 24 items, one two-level
//! factor, a small random fraction of observations deleted). The
//! *complex* design draws the number of subjects, per-subject observation
//! counts, and factor-level probabilities at random, which is what
//! produces the imbalance the toolkit studies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastic::{sample_dirichlet, sample_poisson_min1, RngStream};

/// Two-level factor present in every design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum X1Level {
    A,
    B,
}

/// Three-level factor present only in the complex design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum X2Level {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemManipulation {
    /// Each item appears under exactly one x1 level.
    BetweenItem,
    /// Each item appears under both x1 levels, counterbalanced across
    /// two subject lists.
    WithinItem,
}

/// Configuration of the fully crossed subjects-by-items design.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimpleDesignConfig {
    pub n_items: usize,
    pub item_manipulation: ItemManipulation,
    /// True null: the x1 fixed effect is zero in the generating model.
    pub h0_true: bool,
}

impl SimpleDesignConfig {
    pub const N_SUBJECTS: usize = 24;
    pub const MISSING_RATE_MAX: f64 = 0.05;

    pub fn new(n_items: usize, item_manipulation: ItemManipulation, h0_true: bool) -> Result<Self> {
        if n_items != 12 && n_items != 24 {
            return Err(Error::InvalidParameter(format!(
                "simple design supports 12 or 24 items, got {n_items}"
            )));
        }
        Ok(Self { n_items, item_manipulation, h0_true })
    }
}

/// Dataset-level factor probabilities sampled for the complex design.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LevelProbs {
    pub p_x1: [f64; 2],
    pub p_x2: [f64; 3],
}

/// One simulated repeated-measures dataset.
///
/// Subject and item indices are stored zero-based; CSV serialization uses
/// one-based indices for external inspection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subject: Vec<usize>,
    pub item: Option<Vec<usize>>,
    pub x1: Vec<X1Level>,
    pub x2: Option<Vec<X2Level>>,
    pub y: Option<Vec<f64>>,
    pub n_subjects: usize,
    pub n_items: Option<usize>,
    /// Sampled level probabilities (complex design only).
    pub level_probs: Option<LevelProbs>,
    /// Sampled Poisson rate for per-subject counts (complex design only).
    pub lambda: Option<f64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.subject.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.x1.len() != n {
            return Err(Error::InvalidParameter("x1 length differs from subject length".into()));
        }
        for &field_len in [
            self.item.as_ref().map(Vec::len),
            self.x2.as_ref().map(Vec::len),
            self.y.as_ref().map(Vec::len),
        ]
        .iter()
        .flatten()
        {
            if field_len != n {
                return Err(Error::InvalidParameter(
                    "per-observation fields must all have the same length".into(),
                ));
            }
        }
        if self.subject.iter().any(|&s| s >= self.n_subjects) {
            return Err(Error::InvalidParameter("subject index out of range".into()));
        }
        if let (Some(items), Some(n_items)) = (&self.item, self.n_items) {
            if items.iter().any(|&i| i >= n_items) {
                return Err(Error::InvalidParameter("item index out of range".into()));
            }
        }
        Ok(())
    }

    /// Per-observation count for each subject.
    pub fn subject_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_subjects];
        for &s in &self.subject {
            counts[s] += 1;
        }
        counts
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["subject", "item", "x1", "x2", "y"])?;
        for i in 0..self.n() {
            let item = self.item.as_ref().map_or(String::new(), |v| (v[i] + 1).to_string());
            let x2 = self.x2.as_ref().map_or("", |v| match v[i] {
                X2Level::A => "a",
                X2Level::B => "b",
                X2Level::C => "c",
            });
            let y = self.y.as_ref().map_or(String::new(), |v| format!("{}", v[i]));
            wtr.write_record([
                (self.subject[i] + 1).to_string(),
                item,
                match self.x1[i] {
                    X1Level::A => "a".to_string(),
                    X1Level::B => "b".to_string(),
                },
                x2.to_string(),
                y,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a dataset back from CSV. Generation metadata (level
    /// probabilities, Poisson rate) is not representable in CSV and is
    /// absent on the parsed dataset.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (c_subj, c_item, c_x1, c_x2, c_y) =
            (col("subject"), col("item"), col("x1"), col("x2"), col("y"));
        let c_subj =
            c_subj.ok_or_else(|| Error::Parse("dataset CSV needs a 'subject' column".into()))?;
        let c_x1 = c_x1.ok_or_else(|| Error::Parse("dataset CSV needs an 'x1' column".into()))?;

        let mut subject = Vec::new();
        let mut item: Vec<usize> = Vec::new();
        let mut x1 = Vec::new();
        let mut x2: Vec<X2Level> = Vec::new();
        let mut y: Vec<f64> = Vec::new();
        let (mut any_item, mut any_x2, mut any_y) = (false, false, false);
        for rec in rdr.records() {
            let rec = rec?;
            let get = |c: Option<usize>| c.and_then(|i| rec.get(i)).unwrap_or("");
            let s: usize = rec
                .get(c_subj)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse("bad subject index".into()))?;
            if s == 0 {
                return Err(Error::Parse("subject indices are one-based in CSV".into()));
            }
            subject.push(s - 1);
            match get(c_item) {
                "" => item.push(0),
                v => {
                    any_item = true;
                    let idx: usize = v.parse().map_err(|_| Error::Parse("bad item index".into()))?;
                    if idx == 0 {
                        return Err(Error::Parse("item indices are one-based in CSV".into()));
                    }
                    item.push(idx - 1);
                }
            }
            x1.push(match get(Some(c_x1)) {
                "a" => X1Level::A,
                "b" => X1Level::B,
                v => return Err(Error::Parse(format!("unknown x1 level '{v}'"))),
            });
            match get(c_x2) {
                "" => x2.push(X2Level::A),
                "a" => {
                    any_x2 = true;
                    x2.push(X2Level::A)
                }
                "b" => {
                    any_x2 = true;
                    x2.push(X2Level::B)
                }
                "c" => {
                    any_x2 = true;
                    x2.push(X2Level::C)
                }
                v => return Err(Error::Parse(format!("unknown x2 level '{v}'"))),
            }
            match get(c_y) {
                "" => y.push(0.0),
                v => {
                    any_y = true;
                    y.push(v.parse().map_err(|_| Error::Parse("bad response value".into()))?);
                }
            }
        }
        let n_subjects = subject.iter().copied().max().map_or(0, |m| m + 1);
        let n_items = if any_item { item.iter().copied().max().map(|m| m + 1) } else { None };
        let ds = Dataset {
            subject,
            item: if any_item { Some(item) } else { None },
            x1,
            x2: if any_x2 { Some(x2) } else { None },
            y: if any_y { Some(y) } else { None },
            n_subjects,
            n_items,
            level_probs: None,
            lambda: None,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// The crossed layout before deletion: one row per (subject, item) pair,
/// with the x1 assignment dictated by the manipulation.
fn simple_layout(cfg: &SimpleDesignConfig) -> (Vec<usize>, Vec<usize>, Vec<X1Level>) {
    let s = SimpleDesignConfig::N_SUBJECTS;
    let mut subject = Vec::with_capacity(s * cfg.n_items);
    let mut item = Vec::with_capacity(s * cfg.n_items);
    let mut x1 = Vec::with_capacity(s * cfg.n_items);
    for subj in 0..s {
        for it in 0..cfg.n_items {
            subject.push(subj);
            item.push(it);
            let level = match cfg.item_manipulation {
                // Even split: the first half of the items carry level a.
                ItemManipulation::BetweenItem => {
                    if it < cfg.n_items / 2 {
                        X1Level::A
                    } else {
                        X1Level::B
                    }
                }
                // Two counterbalanced lists: subjects alternate lists, and
                // the two lists see opposite item-parity assignments, so
                // every item occurs under both levels across the dataset.
                ItemManipulation::WithinItem => {
                    if (subj + it) % 2 == 0 {
                        X1Level::A
                    } else {
                        X1Level::B
                    }
                }
            };
            x1.push(level);
        }
    }
    (subject, item, x1)
}

/// Generates the fully crossed subjects-by-items dataset, then deletes a
/// uniformly drawn fraction u ~ Uniform(0, 0.05) of observations.
///
/// Exactly floor(u·n) observations are removed (uniformly without
/// replacement) so the deleted fraction can never exceed the 5% cap.
pub fn gen_simple_design(cfg: &SimpleDesignConfig, rng: &mut RngStream) -> Dataset {
    let (mut subject, mut item, mut x1) = simple_layout(cfg);
    let n = subject.len();
    let rate = rng.uniform_range(0.0, SimpleDesignConfig::MISSING_RATE_MAX);
    let n_delete = (rate * n as f64).floor() as usize;
    let delete = rand::seq::index::sample(rng, n, n_delete);
    let mut keep = vec![true; n];
    for idx in delete {
        keep[idx] = false;
    }
    let mut mask = keep.iter().copied();
    subject.retain(|_| mask.next().unwrap());
    let mut mask = keep.iter().copied();
    item.retain(|_| mask.next().unwrap());
    let mut mask = keep.iter().copied();
    x1.retain(|_| mask.next().unwrap());

    Dataset {
        subject,
        item: Some(item),
        x1,
        x2: None,
        y: None,
        n_subjects: SimpleDesignConfig::N_SUBJECTS,
        n_items: Some(cfg.n_items),
        level_probs: None,
        lambda: None,
    }
}

/// Generates the imbalanced design: S ~ Uniform{30..60} subjects,
/// per-subject counts max{Poisson(λ), 1} with λ ~ Uniform(20, 30), and
/// per-observation factor levels drawn from Dirichlet-sampled
/// probabilities p(x1) ~ Dirichlet(1,1), p(x2) ~ Dirichlet(1,1,1).
pub fn gen_complex_design(rng: &mut RngStream) -> Dataset {
    let s = rng.uniform_int(30, 60) as usize;
    let lambda = rng.uniform_range(20.0, 30.0);
    let p1 = sample_dirichlet(&[1.0, 1.0], rng).expect("fixed valid alpha");
    let p2 = sample_dirichlet(&[1.0, 1.0, 1.0], rng).expect("fixed valid alpha");

    let mut subject = Vec::new();
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    for subj in 0..s {
        let n_s = sample_poisson_min1(lambda, rng).expect("lambda in (20,30)");
        for _ in 0..n_s {
            subject.push(subj);
            x1.push(if rng.categorical(&p1) == 0 { X1Level::A } else { X1Level::B });
            x2.push(match rng.categorical(&p2) {
                0 => X2Level::A,
                1 => X2Level::B,
                _ => X2Level::C,
            });
        }
    }
    Dataset {
        subject,
        item: None,
        x1,
        x2: Some(x2),
        y: None,
        n_subjects: s,
        n_items: None,
        level_probs: Some(LevelProbs { p_x1: [p1[0], p1[1]], p_x2: [p2[0], p2[1], p2[2]] }),
        lambda: Some(lambda),
    }
}

/// Builds the fixed-effects matrix.
///
/// Complex design (x2 present): sum contrasts, X0 = 1; X1 = +1/−1 for
/// x1 = a/b; for x2 = (a, b, c), X2 = (+1, 0, −1) and X3 = (0, +1, −1).
/// Simple design (no x2): the two-level factor is deviation coded
/// ±1/2, following the crossed-design conventions of Barr et al., so
/// that the a-vs-b difference equals the slope coefficient. The
/// generating distributions for the simple regime assume this coding
/// (with ±1 the simulated log-odds leave the intended extreme-value
/// rate, about 0.2% of observations, several-fold too high).
pub fn fixed_effects_matrix(ds: &Dataset) -> DMatrix<f64> {
    let n = ds.n();
    let p = if ds.x2.is_some() { 4 } else { 2 };
    let x1_code = if ds.x2.is_some() { 1.0 } else { 0.5 };
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = match ds.x1[i] {
            X1Level::A => x1_code,
            X1Level::B => -x1_code,
        };
        if let Some(x2) = &ds.x2 {
            let (c2, c3) = match x2[i] {
                X2Level::A => (1.0, 0.0),
                X2Level::B => (0.0, 1.0),
                X2Level::C => (-1.0, -1.0),
            };
            x[(i, 2)] = c2;
            x[(i, 3)] = c3;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingFactor {
    Subject,
    Item,
}

/// One grouping factor's random-effects request: which fixed-effect
/// columns vary by group.
#[derive(Debug, Clone)]
pub struct FactorSpec {
    pub grouping: GroupingFactor,
    /// Indices into the fixed-effects matrix columns; the intercept is 0.
    pub effect_cols: Vec<usize>,
}

/// The random-effects structure of a model: one entry per grouping factor.
#[derive(Debug, Clone)]
pub struct RandomEffectsSpec {
    pub factors: Vec<FactorSpec>,
}

impl RandomEffectsSpec {
    /// Maximal structure for the complex design: all four fixed-effect
    /// columns vary by subject.
    pub fn maximal_complex() -> Self {
        Self {
            factors: vec![FactorSpec { grouping: GroupingFactor::Subject, effect_cols: vec![0, 1, 2, 3] }],
        }
    }

    /// Maximal structure for the simple design: intercept and x1 slope by
    /// subject; by item, the same when the manipulation is within-item,
    /// intercept only when between-item (a between-item factor has no
    /// within-item contrast, so an item slope is not estimable).
    pub fn maximal_simple(item_manipulation: ItemManipulation) -> Self {
        let item_cols = match item_manipulation {
            ItemManipulation::WithinItem => vec![0, 1],
            ItemManipulation::BetweenItem => vec![0],
        };
        Self {
            factors: vec![
                FactorSpec { grouping: GroupingFactor::Subject, effect_cols: vec![0, 1] },
                FactorSpec { grouping: GroupingFactor::Item, effect_cols: item_cols },
            ],
        }
    }

    /// Maximal structure inferred from a dataset's observed columns:
    /// complex when x2 is present, otherwise the simple structure with
    /// the manipulation detected from item/level co-occurrence.
    pub fn infer(ds: &Dataset) -> Self {
        if ds.x2.is_some() {
            return Self::maximal_complex();
        }
        match (&ds.item, ds.n_items) {
            (Some(items), Some(n_items)) => {
                let mut seen_a = vec![false; n_items];
                let mut seen_b = vec![false; n_items];
                for (i, &it) in items.iter().enumerate() {
                    match ds.x1[i] {
                        X1Level::A => seen_a[it] = true,
                        X1Level::B => seen_b[it] = true,
                    }
                }
                let within = (0..n_items).all(|i| seen_a[i] && seen_b[i]);
                Self::maximal_simple(if within {
                    ItemManipulation::WithinItem
                } else {
                    ItemManipulation::BetweenItem
                })
            }
            _ => Self {
                factors: vec![FactorSpec { grouping: GroupingFactor::Subject, effect_cols: vec![0, 1] }],
            },
        }
    }
}

/// One grouping factor's slice of Z in compressed form: observation i
/// contributes `vals[i, ..]` to the k columns of its group's block.
#[derive(Debug, Clone)]
pub struct ZFactorBlock {
    pub grouping: GroupingFactor,
    pub n_groups: usize,
    /// Effects per group.
    pub k: usize,
    /// First Z column of this factor's group blocks (group-major layout).
    pub col_offset: usize,
    pub group_of_obs: Vec<usize>,
    /// n×k row-major per-observation covariate values.
    pub vals: Vec<f64>,
    /// The fixed-effect columns these values replicate.
    pub effect_cols: Vec<usize>,
}

impl ZFactorBlock {
    pub fn val(&self, obs: usize, j: usize) -> f64 {
        self.vals[obs * self.k + j]
    }

    /// Z column index of (group g, effect j) within the full Z matrix.
    pub fn col(&self, g: usize, j: usize) -> usize {
        self.col_offset + g * self.k + j
    }
}

/// The n×q random-effects matrix in compressed per-factor form.
///
/// Columns are laid out factor by factor, and group-major within a
/// factor: the block for group g of a k-effect factor spans columns
/// `offset + g·k .. offset + (g+1)·k`.
#[derive(Debug, Clone)]
pub struct ZMatrix {
    pub n: usize,
    pub q: usize,
    pub factors: Vec<ZFactorBlock>,
}

impl ZMatrix {
    /// Z·γ via the compressed structure.
    pub fn mul_gamma(&self, gamma: &DVector<f64>) -> DVector<f64> {
        assert_eq!(gamma.len(), self.q, "gamma length must equal q");
        let mut out = DVector::zeros(self.n);
        for f in &self.factors {
            for i in 0..self.n {
                let base = f.col(f.group_of_obs[i], 0);
                let mut acc = 0.0;
                for j in 0..f.k {
                    acc += f.val(i, j) * gamma[base + j];
                }
                out[i] += acc;
            }
        }
        out
    }

    /// Zᵀ·v via the compressed structure.
    pub fn transpose_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n, "vector length must equal n");
        let mut out = DVector::zeros(self.q);
        for f in &self.factors {
            for i in 0..self.n {
                let base = f.col(f.group_of_obs[i], 0);
                for j in 0..f.k {
                    out[base + j] += f.val(i, j) * v[i];
                }
            }
        }
        out
    }

    /// Dense n×q materialization (test and small-problem use only).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.q);
        for f in &self.factors {
            for i in 0..self.n {
                for j in 0..f.k {
                    z[(i, f.col(f.group_of_obs[i], j))] = f.val(i, j);
                }
            }
        }
        z
    }
}

/// Fixed- and random-effects matrices for one dataset and structure.
#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub x: DMatrix<f64>,
    pub z: ZMatrix,
}

/// Builds Z for the requested random-effects structure by replicating the
/// named fixed-effect columns within each group's block.
pub fn random_effects_matrix(ds: &Dataset, spec: &RandomEffectsSpec) -> Result<ZMatrix> {
    let x = fixed_effects_matrix(ds);
    build_z(ds, &x, spec)
}

/// Builds both model matrices in one pass.
pub fn model_matrices(ds: &Dataset, spec: &RandomEffectsSpec) -> Result<ModelMatrices> {
    let x = fixed_effects_matrix(ds);
    let z = build_z(ds, &x, spec)?;
    Ok(ModelMatrices { x, z })
}

fn build_z(ds: &Dataset, x: &DMatrix<f64>, spec: &RandomEffectsSpec) -> Result<ZMatrix> {
    let n = ds.n();
    let mut factors = Vec::with_capacity(spec.factors.len());
    let mut col_offset = 0;
    for fs in &spec.factors {
        let (group_of_obs, n_groups) = match fs.grouping {
            GroupingFactor::Subject => (ds.subject.clone(), ds.n_subjects),
            GroupingFactor::Item => match (&ds.item, ds.n_items) {
                (Some(items), Some(n_items)) => (items.clone(), n_items),
                _ => {
                    return Err(Error::InvalidParameter(
                        "random-effects structure references items, but the dataset has none".into(),
                    ))
                }
            },
        };
        let k = fs.effect_cols.len();
        if k == 0 {
            return Err(Error::InvalidParameter("a grouping factor needs at least one effect".into()));
        }
        if fs.effect_cols.iter().any(|&c| c >= x.ncols()) {
            return Err(Error::InvalidParameter(
                "random-effect column index exceeds the fixed-effects matrix".into(),
            ));
        }
        let mut vals = Vec::with_capacity(n * k);
        for i in 0..n {
            for &c in &fs.effect_cols {
                vals.push(x[(i, c)]);
            }
        }
        factors.push(ZFactorBlock {
            grouping: fs.grouping,
            n_groups,
            k,
            col_offset,
            group_of_obs,
            vals,
            effect_cols: fs.effect_cols.clone(),
        });
        col_offset += n_groups * k;
    }
    Ok(ZMatrix { n, q: col_offset, factors })
}
