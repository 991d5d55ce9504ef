//! Experiment orchestration: generate datasets, fit them with both
//! pipelines, diagnose the fits, and persist one record per simulation.
//!
//! Determinism is the core contract. Simulation k draws every random input
//! from `RngStream(base_seed, k)` and its Bayesian chains from streams
//! `k·16 + chain`, so a record depends only on (seed, k, config), never on
//! sibling simulations, worker count, or scheduling. Records are appended
//! to a JSON-lines file in sim_id order behind a single writer; a partial
//! file resumes by re-running only the missing tail. Wall-time fields are
//! the one nondeterministic part and can be zeroed with a flag so output
//! files compare byte-for-byte.
//!
//! Fit failures never abort an experiment; they are captured inside the
//! record with the ingredients needed to re-classify convergence at any
//! tolerance later.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayesfit::{
    classify_bayes_convergence, nuts_run, NutsConfig, PosteriorChains,
};
use crate::design::{
    gen_complex_design, gen_simple_design, model_matrices, ItemManipulation, ModelMatrices,
    RandomEffectsSpec, SimpleDesignConfig,
};
use crate::diagnostics::{
    classify_convergence_parts, parameter_errors_of, rank_of_covariance, summarize_true_model,
    ConvergenceParts, ConvergenceReason, ParameterErrors, PointEstimates, RankStatus,
};
use crate::error::{Error, Result};
use crate::freqfit::{fit_glmm_logistic, fit_lmm, standardize_response, FitOutcome};
use crate::stochastic::RngStream;
use crate::truemodel::{
    extreme_fraction, generate_response, linear_predictor, sample_gamma, sample_true_complex,
    sample_true_simple, Family, TrueModelParams,
};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const HEADER_FILE: &str = "header.json";
const FORMAT_VERSION: u32 = 1;

/// Which experimental design a run simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Simple,
    Complex,
}

/// Full description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub design: DesignKind,
    pub family: Family,
    pub n_sims: u64,
    pub base_seed: u64,
    /// Gradient tolerance for the frequentist convergence label stored in
    /// records (re-classifiable later from the recorded ingredients).
    pub tol: f64,
    pub fit_freq: bool,
    pub fit_bayes: bool,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    #[serde(default)]
    pub nuts: NutsConfig,
    /// Zero all wall-time fields and omit the header timestamp so two runs
    /// compare byte-for-byte.
    #[serde(default)]
    pub canonical_times: bool,
    /// Dump per-fit posterior draws to `draws/sim_<id>.csv`.
    #[serde(default)]
    pub dump_draws: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sims < 1 {
            return Err(Error::InvalidParameter("n_sims must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "convergence tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidParameter("worker count must be at least 1".into()));
        }
        Ok(())
    }

    /// Fields that must agree for a resume to be valid. Execution-local
    /// settings (output path, worker count) are free to change.
    fn semantic_eq(&self, other: &ExperimentConfig) -> bool {
        self.design == other.design
            && self.family == other.family
            && self.n_sims == other.n_sims
            && self.base_seed == other.base_seed
            && self.tol == other.tol
            && self.fit_freq == other.fit_freq
            && self.fit_bayes == other.fit_bayes
            && self.nuts == other.nuts
            && self.canonical_times == other.canonical_times
    }
}

/// First line of every run directory: configuration plus code version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub format_version: u32,
    pub code_version: String,
    pub config: ExperimentConfig,
    /// Unix seconds; absent under canonical times.
    pub created_unix_s: Option<u64>,
}

/// The simple-design condition a given simulation lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleCondition {
    pub n_items: usize,
    pub item_manipulation: ItemManipulation,
    pub h0_true: bool,
}

/// Simple-design runs rotate through the 8 conditions
/// (items ∈ {12, 24}) × (between/within item) × (null true/false),
/// assigning sim k to condition (k−1) mod 8 so any n_sims divisible by 8
/// covers them evenly.
pub fn simple_condition(sim_id: u64) -> SimpleCondition {
    let idx = (sim_id - 1) % 8;
    SimpleCondition {
        n_items: if idx & 4 != 0 { 24 } else { 12 },
        item_manipulation: if idx & 2 != 0 {
            ItemManipulation::WithinItem
        } else {
            ItemManipulation::BetweenItem
        },
        h0_true: idx & 1 != 0,
    }
}

/// One grouping factor of a parameter set: SDs plus the strict lower
/// triangle of the correlation matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFactor {
    pub sigma: Vec<f64>,
    pub omega_lower: Vec<f64>,
}

/// A full parameter set (truth or estimate) in the recorded layout.
/// Gaussian sets are on the standardized-response scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub beta: Vec<f64>,
    pub factors: Vec<ParamFactor>,
    pub sigma_eps: Option<f64>,
}

impl ParamSet {
    pub fn from_truth(truth: &TrueModelParams) -> Self {
        ParamSet {
            beta: truth.beta.iter().copied().collect(),
            factors: truth
                .factors
                .iter()
                .map(|f| {
                    let m = f.omega.matrix();
                    ParamFactor {
                        sigma: f.sigma.clone(),
                        omega_lower: strict_lower(&m),
                    }
                })
                .collect(),
            sigma_eps: truth.sigma_eps,
        }
    }

    pub fn from_points(est: &PointEstimates) -> Self {
        ParamSet {
            beta: est.beta.clone(),
            factors: est
                .factors
                .iter()
                .map(|(sigma, omega)| ParamFactor {
                    sigma: sigma.clone(),
                    omega_lower: strict_lower(omega),
                })
                .collect(),
            sigma_eps: est.sigma_eps,
        }
    }
}

fn strict_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * (m.nrows() - 1) / 2);
    for i in 0..m.nrows() {
        for j in 0..i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Everything recorded about the frequentist fit of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreqFitRecord {
    /// Label at the experiment's configured tolerance.
    pub converged: bool,
    pub reasons: Vec<ConvergenceReason>,
    /// Raw ingredients for re-classification at any tolerance.
    pub parts: ConvergenceParts,
    /// Any relative-Cholesky diagonal on the zero boundary.
    pub boundary: bool,
    pub estimates: Option<ParamSet>,
    pub squared_errors: Option<ParameterErrors>,
    /// Rank of the block-diagonal random-effects covariance factor.
    pub rank: Option<RankStatus>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

/// Everything recorded about the Bayesian fit of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesFitRecord {
    /// No post-warmup divergences and max split-R̂ < 1.1.
    pub converged: bool,
    pub divergences: Option<usize>,
    /// None encodes a non-finite R̂ (always unconverged).
    pub max_rhat: Option<f64>,
    /// Posterior means.
    pub estimates: Option<ParamSet>,
    pub squared_errors: Option<ParameterErrors>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

/// One simulation: design, truth, and the outcome of every enabled fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRecord {
    pub sim_id: u64,
    pub design: DesignKind,
    pub family: Family,
    /// Simple design only.
    pub condition: Option<SimpleCondition>,
    /// Subjects.
    pub s: usize,
    /// Observations.
    pub n: usize,
    /// Balance B ∈ (0,1]; complex design only.
    pub balance: Option<f64>,
    /// Smallest random-effect variance in the recorded truth (σ² units).
    pub min_variance: f64,
    /// Sum of squared strict-lower-triangle true correlations.
    pub total_correlation: f64,
    /// Share of |true log-odds| > 5; logistic only.
    pub extreme_fraction: Option<f64>,
    pub truth: ParamSet,
    pub freq: Option<FreqFitRecord>,
    pub bayes: Option<BayesFitRecord>,
    pub wall_time_s: f64,
}

/// Generates and fits simulation `sim_id` under `config`. Pure given
/// (config, sim_id): all randomness comes from the derived streams.
pub fn run_one_sim(config: &ExperimentConfig, sim_id: u64) -> Result<SimRecord> {
    let t_start = Instant::now();
    let mut rng = RngStream::new(config.base_seed, sim_id);
    let family = config.family;

    // Design, truth, response.
    let (dataset, matrices, truth_raw, condition) = match config.design {
        DesignKind::Simple => {
            let cond = simple_condition(sim_id);
            let cfg = SimpleDesignConfig::new(cond.n_items, cond.item_manipulation, cond.h0_true)?;
            let ds = gen_simple_design(&cfg, &mut rng);
            let spec = RandomEffectsSpec::maximal_simple(cond.item_manipulation);
            let m = model_matrices(&ds, &spec)?;
            let truth = sample_true_simple(family, cond.h0_true, cond.item_manipulation, &mut rng);
            (ds, m, truth, Some(cond))
        }
        DesignKind::Complex => {
            let ds = gen_complex_design(&mut rng);
            let spec = RandomEffectsSpec::maximal_complex();
            let m = model_matrices(&ds, &spec)?;
            let truth = sample_true_complex(family, &mut rng);
            (ds, m, truth, None)
        }
    };
    let model = sample_gamma(&truth_raw, &matrices.z, &mut rng)?;
    let y = generate_response(&matrices, &model, &mut rng)?;
    let yv: Vec<f64> = y.iter().copied().collect();

    // Truth on the scale fits report on: gaussian responses are
    // standardized by their own sample moments before any fit.
    let truth = match family {
        Family::Gaussian => {
            let (_, mean, sd) = standardize_response(&yv)?;
            truth_raw.to_standardized_scale(mean, sd)?
        }
        Family::Logistic => truth_raw,
    };
    let (min_variance, total_correlation) = summarize_true_model(&truth);

    let balance = match config.design {
        DesignKind::Complex => Some(crate::balance::dataset_balance(&dataset)?.b),
        DesignKind::Simple => None,
    };
    let extreme = match family {
        Family::Logistic => {
            let eta = linear_predictor(&matrices, &model)?;
            Some(extreme_fraction(eta.as_slice())?)
        }
        Family::Gaussian => None,
    };

    let freq = if config.fit_freq {
        Some(run_freq_fit(config, &matrices, &yv, &truth))
    } else {
        None
    };
    let bayes = if config.fit_bayes {
        Some(run_bayes_fit(config, sim_id, &matrices, &yv, &truth))
    } else {
        None
    };

    Ok(SimRecord {
        sim_id,
        design: config.design,
        family,
        condition,
        s: dataset.n_subjects,
        n: dataset.n(),
        balance,
        min_variance,
        total_correlation,
        extreme_fraction: extreme,
        truth: ParamSet::from_truth(&truth),
        freq,
        bayes,
        wall_time_s: wall(config, t_start),
    })
}

fn wall(config: &ExperimentConfig, start: Instant) -> f64 {
    if config.canonical_times {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    }
}

fn run_freq_fit(
    config: &ExperimentConfig,
    matrices: &ModelMatrices,
    y: &[f64],
    truth: &TrueModelParams,
) -> FreqFitRecord {
    let t0 = Instant::now();
    let fit_res = match config.family {
        Family::Gaussian => fit_lmm(matrices, y),
        Family::Logistic => fit_glmm_logistic(matrices, y),
    };
    match fit_res {
        Ok(fit) => {
            let parts = ConvergenceParts::from_fit(&fit);
            let status = classify_convergence_parts(&parts, config.tol);
            let est = PointEstimates::from_fit(&fit);
            let (estimates, squared_errors) = match parameter_errors_of(truth, &est) {
                Ok(err) => (Some(ParamSet::from_points(&est)), Some(err)),
                Err(_) => (Some(ParamSet::from_points(&est)), None),
            };
            FreqFitRecord {
                converged: status.converged,
                reasons: status.reasons,
                parts,
                boundary: fit.boundary,
                estimates,
                squared_errors,
                rank: Some(rank_of_covariance(&block_diag_chol(&fit))),
                error: None,
                wall_time_s: wall(config, t0),
            }
        }
        Err(e) => {
            let parts = ConvergenceParts::failed(y.len());
            let status = classify_convergence_parts(&parts, config.tol);
            FreqFitRecord {
                converged: false,
                reasons: status.reasons,
                parts,
                boundary: false,
                estimates: None,
                squared_errors: None,
                rank: None,
                error: Some(e.to_string()),
                wall_time_s: wall(config, t0),
            }
        }
    }
}

/// Block-diagonal covariance factor over all grouping factors; deficient
/// iff any factor's estimated covariance is deficient.
fn block_diag_chol(fit: &FitOutcome) -> DMatrix<f64> {
    let total: usize = fit.factors.iter().map(|f| f.k()).sum();
    let mut m = DMatrix::zeros(total, total);
    let mut off = 0;
    for f in &fit.factors {
        let c = f.chol_matrix();
        let k = f.k();
        m.view_mut((off, off), (k, k)).copy_from(&c);
        off += k;
    }
    m
}

fn run_bayes_fit(
    config: &ExperimentConfig,
    sim_id: u64,
    matrices: &ModelMatrices,
    y: &[f64],
    truth: &TrueModelParams,
) -> BayesFitRecord {
    let t0 = Instant::now();
    let chain_rng = RngStream::new(config.base_seed, sim_id.wrapping_mul(16));
    match nuts_run(matrices, y, config.family, &config.nuts, &chain_rng) {
        Ok(chains) => {
            let conv = classify_bayes_convergence(&chains);
            let est = bayes_point_estimates(&chains);
            let (estimates, squared_errors) = match parameter_errors_of(truth, &est) {
                Ok(err) => (Some(ParamSet::from_points(&est)), Some(err)),
                Err(_) => (Some(ParamSet::from_points(&est)), None),
            };
            if config.dump_draws {
                // Best-effort: a dump failure must not poison the record.
                let _ = dump_draws(&config.output_dir, sim_id, &chains);
            }
            BayesFitRecord {
                converged: conv.converged,
                divergences: Some(conv.divergences),
                max_rhat: conv.max_rhat.is_finite().then_some(conv.max_rhat),
                estimates,
                squared_errors,
                error: None,
                wall_time_s: wall(config, t0),
            }
        }
        Err(e) => BayesFitRecord {
            converged: false,
            divergences: None,
            max_rhat: None,
            estimates: None,
            squared_errors: None,
            error: Some(e.to_string()),
            wall_time_s: wall(config, t0),
        },
    }
}

/// Posterior means arranged like a frequentist point estimate.
fn bayes_point_estimates(chains: &PosteriorChains) -> PointEstimates {
    let lay = &chains.layout;
    let beta = (0..lay.p).map(|j| chains.mean(j)).collect();
    let mut factors = Vec::with_capacity(lay.ks.len());
    for (f, &k) in lay.ks.iter().enumerate() {
        let sigma: Vec<f64> = (0..k).map(|j| chains.mean(lay.sigma_start(f) + j)).collect();
        let mut omega = DMatrix::identity(k, k);
        let mut idx = lay.omega_start(f);
        for i in 0..k {
            for j in 0..i {
                let v = chains.mean(idx);
                omega[(i, j)] = v;
                omega[(j, i)] = v;
                idx += 1;
            }
        }
        factors.push((sigma, omega));
    }
    PointEstimates {
        beta,
        factors,
        sigma_eps: lay.sigma_eps_index().map(|i| chains.mean(i)),
    }
}

/// Writes one fit's draws as CSV rows (chain, draw, parameter, value).
fn dump_draws(dir: &Path, sim_id: u64, chains: &PosteriorChains) -> Result<()> {
    let draws_dir = dir.join("draws");
    fs::create_dir_all(&draws_dir)?;
    let file = fs::File::create(draws_dir.join(format!("sim_{sim_id}.csv")))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["chain", "draw", "parameter", "value"])?;
    let names = chains.layout.names();
    for (c, chain) in chains.draws.iter().enumerate() {
        for (d, draw) in chain.iter().enumerate() {
            for (j, v) in draw.iter().enumerate() {
                w.write_record([c.to_string(), d.to_string(), names[j].clone(), format!("{v}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Persistence and orchestration
// ---------------------------------------------------------------------------

fn header_for(config: &ExperimentConfig) -> RunHeader {
    RunHeader {
        format_version: FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        created_unix_s: if config.canonical_times {
            None
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs())
        },
    }
}

fn records_path(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(RECORDS_FILE)
}

fn header_path(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(HEADER_FILE)
}

/// Runs every simulation from scratch, truncating any previous output.
/// Returns the records in sim_id order; the same records are persisted to
/// `output_dir/records.jsonl` with the run header in `header.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SimRecord>> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let header = header_for(config);
    fs::write(header_path(config), serde_json::to_string_pretty(&header)? + "\n")?;
    let file = fs::File::create(records_path(config))?;
    let todo: Vec<u64> = (1..=config.n_sims).collect();
    run_sims(config, &todo, file, Vec::new())
}

/// Completes a partial run: validates the stored header against `config`,
/// keeps the longest valid record prefix (truncating trailing corruption),
/// and runs only the missing simulations. The final file is identical to an
/// uninterrupted run's.
pub fn resume_experiment(config: &ExperimentConfig) -> Result<Vec<SimRecord>> {
    config.validate()?;
    let hp = header_path(config);
    if !hp.exists() {
        return run_experiment(config);
    }
    let stored: RunHeader = serde_json::from_str(&fs::read_to_string(&hp)?)?;
    if !stored.config.semantic_eq(config) {
        return Err(Error::StateMismatch(format!(
            "stored run header disagrees with the resume config (stored seed {}, given {})",
            stored.config.base_seed, config.base_seed
        )));
    }
    let rp = records_path(config);
    let (existing, valid_bytes) = if rp.exists() {
        read_valid_prefix(&rp, config.n_sims)?
    } else {
        (Vec::new(), 0)
    };
    // Truncate trailing garbage (partial last line, corrupt record).
    let file = fs::OpenOptions::new().create(true).append(true).open(&rp)?;
    file.set_len(valid_bytes)?;
    let done = existing.len() as u64;
    let todo: Vec<u64> = (done + 1..=config.n_sims).collect();
    run_sims(config, &todo, file, existing)
}

/// Longest prefix of records with sim_ids exactly 1, 2, 3, … and the byte
/// length it occupies.
fn read_valid_prefix(path: &Path, n_sims: u64) -> Result<(Vec<SimRecord>, u64)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    let mut bytes = 0u64;
    let mut expect = 1u64;
    for line in reader.lines() {
        let line = line?;
        match serde_json::from_str::<SimRecord>(&line) {
            Ok(rec) if rec.sim_id == expect && expect <= n_sims => {
                bytes += line.len() as u64 + 1;
                records.push(rec);
                expect += 1;
            }
            _ => break,
        }
    }
    Ok((records, bytes))
}

/// Computes `todo` (already sorted ascending) across the worker pool and
/// appends each record to `sink` in sim_id order.
fn run_sims(
    config: &ExperimentConfig,
    todo: &[u64],
    sink: fs::File,
    mut records: Vec<SimRecord>,
) -> Result<Vec<SimRecord>> {
    let mut out = std::io::BufWriter::new(sink);
    if config.parallelism <= 1 || todo.len() <= 1 {
        for &sim_id in todo {
            let rec = run_one_sim(config, sim_id)?;
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
            out.flush()?;
            records.push(rec);
        }
        return Ok(records);
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(u64, Result<SimRecord>)>();
    let result: Result<()> = std::thread::scope(|scope| {
        for _ in 0..config.parallelism.min(todo.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= todo.len() {
                    break;
                }
                let sim_id = todo[i];
                if tx.send((sim_id, run_one_sim(config, sim_id))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: reorder results into sim_id order.
        let mut pending: BTreeMap<u64, SimRecord> = BTreeMap::new();
        let mut next_write = todo.first().copied().unwrap_or(0);
        for (sim_id, res) in rx {
            pending.insert(sim_id, res?);
            while let Some(rec) = pending.remove(&next_write) {
                writeln!(out, "{}", serde_json::to_string(&rec)?)?;
                out.flush()?;
                records.push(rec);
                next_write += 1;
            }
        }
        Ok(())
    });
    result?;
    Ok(records)
}

/// Reads a run directory back: header plus all records.
pub fn read_run(dir: &Path) -> Result<(RunHeader, Vec<SimRecord>)> {
    let header: RunHeader =
        serde_json::from_str(&fs::read_to_string(dir.join(HEADER_FILE))?)?;
    let reader = BufReader::new(fs::File::open(dir.join(RECORDS_FILE))?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<SimRecord>(&line)?);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn test_config(dir: &Path, design: DesignKind, family: Family, n_sims: u64) -> ExperimentConfig {
        ExperimentConfig {
            design,
            family,
            n_sims,
            base_seed: 20240817,
            tol: 0.01,
            fit_freq: true,
            fit_bayes: false,
            output_dir: dir.to_path_buf(),
            parallelism: 1,
            nuts: NutsConfig::default(),
            canonical_times: true,
            dump_draws: false,
        }
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mixsim-runner-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    // [TRIVIAL] the 8 simple conditions rotate evenly.
    #[test]
    fn condition_rotation_is_even() {
        let mut seen = BTreeSet::new();
        for sim_id in 1..=8 {
            let c = simple_condition(sim_id);
            seen.insert((c.n_items, c.item_manipulation as u8, c.h0_true));
        }
        assert_eq!(seen.len(), 8, "eight consecutive sims must cover all conditions");
        for sim_id in 1..=8 {
            assert_eq!(simple_condition(sim_id), simple_condition(sim_id + 8));
        }
    }

    // [TRIVIAL] determinism contract: same config and seed → byte-identical
    // output, at any worker count.
    #[test]
    fn identical_runs_are_byte_identical() {
        let d1 = tmpdir("det1");
        let d2 = tmpdir("det2");
        let mut c1 = test_config(&d1, DesignKind::Simple, Family::Gaussian, 6);
        let c2 = ExperimentConfig { output_dir: d2.clone(), parallelism: 3, ..c1.clone() };
        run_experiment(&c1).unwrap();
        run_experiment(&c2).unwrap();
        let b1 = fs::read(d1.join(RECORDS_FILE)).unwrap();
        let b2 = fs::read(d2.join(RECORDS_FILE)).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2, "worker count must not affect output bytes");
        let h1 = fs::read(d1.join(HEADER_FILE)).unwrap();
        // Headers differ only in output_dir/parallelism, by construction.
        assert!(!h1.is_empty());

        // Re-running in place reproduces the same bytes.
        c1.parallelism = 2;
        run_experiment(&c1).unwrap();
        assert_eq!(fs::read(d1.join(RECORDS_FILE)).unwrap(), b1);
        let _ = fs::remove_dir_all(&d1);
        let _ = fs::remove_dir_all(&d2);
    }

    // [TRIVIAL] resume after truncation reproduces a clean run exactly,
    // including when the tail is a corrupt partial line.
    #[test]
    fn resume_completes_interrupted_run() {
        let d_full = tmpdir("resume-full");
        let d_part = tmpdir("resume-part");
        let c_full = test_config(&d_full, DesignKind::Simple, Family::Gaussian, 6);
        let c_part = ExperimentConfig { output_dir: d_part.clone(), ..c_full.clone() };
        let full = run_experiment(&c_full).unwrap();
        assert_eq!(full.len(), 6);
        run_experiment(&c_part).unwrap();

        // Keep 3 records, then simulate an interrupted write.
        let all = fs::read_to_string(d_part.join(RECORDS_FILE)).unwrap();
        let keep: String = all.lines().take(3).map(|l| format!("{l}\n")).collect();
        fs::write(d_part.join(RECORDS_FILE), format!("{keep}{{\"sim_id\":4,\"trunc")).unwrap();

        let resumed = resume_experiment(&c_part).unwrap();
        assert_eq!(resumed.len(), 6);
        assert_eq!(
            fs::read(d_part.join(RECORDS_FILE)).unwrap(),
            fs::read(d_full.join(RECORDS_FILE)).unwrap()
        );

        // Resume on a complete file is a no-op.
        let before = fs::read(d_part.join(RECORDS_FILE)).unwrap();
        resume_experiment(&c_part).unwrap();
        assert_eq!(fs::read(d_part.join(RECORDS_FILE)).unwrap(), before);
        let _ = fs::remove_dir_all(&d_full);
        let _ = fs::remove_dir_all(&d_part);
    }

    // [TRIVIAL] guard: resuming under a different seed is refused.
    #[test]
    fn resume_rejects_seed_mismatch() {
        let d = tmpdir("resume-seed");
        let c = test_config(&d, DesignKind::Simple, Family::Gaussian, 2);
        run_experiment(&c).unwrap();
        let other = ExperimentConfig { base_seed: 999, ..c };
        let err = resume_experiment(&other).unwrap_err();
        assert!(matches!(err, Error::StateMismatch(_)));
        let _ = fs::remove_dir_all(&d);
    }

    // [TRIVIAL] partial-fit schema: disabled fits are explicit nulls.
    #[test]
    fn record_with_bayes_disabled_has_null_bayes() {
        let d = tmpdir("schema");
        let c = test_config(&d, DesignKind::Complex, Family::Gaussian, 1);
        let recs = run_experiment(&c).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert!(r.bayes.is_none());
        let f = r.freq.as_ref().expect("frequentist fit enabled");
        assert!(f.estimates.is_some());
        assert!(f.squared_errors.is_some());
        assert!(f.rank.is_some());
        let line = fs::read_to_string(d.join(RECORDS_FILE)).unwrap();
        assert!(line.contains("\"bayes\":null"), "skipped fit must serialize as null");
        let _ = fs::remove_dir_all(&d);
    }

    // Record content invariants on a complex-design run, plus replayability:
    // the recorded truth must match an independent replay of the generation
    // streams.
    #[test]
    fn complex_records_are_complete_and_replayable() {
        let d = tmpdir("complex");
        let c = test_config(&d, DesignKind::Complex, Family::Logistic, 3);
        let recs = run_experiment(&c).unwrap();
        for r in &recs {
            assert_eq!(r.design, DesignKind::Complex);
            assert!(r.condition.is_none());
            let b = r.balance.expect("complex records carry balance");
            assert!(b > 0.0 && b <= 1.0);
            assert!(r.extreme_fraction.is_some());
            assert!(r.min_variance > 0.0);
            assert!(r.s >= 2);
            assert!(r.n > r.s);
            assert_eq!(r.truth.beta.len(), 4);
            assert_eq!(r.truth.factors.len(), 1);
            assert_eq!(r.truth.factors[0].sigma.len(), 4);
            assert_eq!(r.truth.factors[0].omega_lower.len(), 6);
            assert!(r.truth.sigma_eps.is_none());
        }

        // Replay sim 2's generation stream independently.
        let mut rng = RngStream::new(c.base_seed, 2);
        let ds = gen_complex_design(&mut rng);
        let truth = sample_true_complex(Family::Logistic, &mut rng);
        assert_eq!(recs[1].s, ds.n_subjects);
        assert_eq!(recs[1].truth, ParamSet::from_truth(&truth));
        let _ = fs::remove_dir_all(&d);
    }

    // Gaussian truths are recorded on the standardized-response scale: an
    // independent replay of the stream plus the standardization must match.
    #[test]
    fn gaussian_truth_is_standardized() {
        let d = tmpdir("std");
        let c = test_config(&d, DesignKind::Complex, Family::Gaussian, 1);
        let recs = run_experiment(&c).unwrap();
        let r = &recs[0];
        assert!(r.truth.sigma_eps.is_some());

        let mut rng = RngStream::new(c.base_seed, 1);
        let ds = gen_complex_design(&mut rng);
        let spec = RandomEffectsSpec::maximal_complex();
        let m = model_matrices(&ds, &spec).unwrap();
        let truth_raw = sample_true_complex(Family::Gaussian, &mut rng);
        let model = sample_gamma(&truth_raw, &m.z, &mut rng).unwrap();
        let y = generate_response(&m, &model, &mut rng).unwrap();
        let yv: Vec<f64> = y.iter().copied().collect();
        let (_, mean, sd) = standardize_response(&yv).unwrap();
        let truth_std = truth_raw.to_standardized_scale(mean, sd).unwrap();
        assert_eq!(r.truth, ParamSet::from_truth(&truth_std));
        assert!(sd > 0.0 && (mean.abs() > 0.0 || sd != 1.0));
        let _ = fs::remove_dir_all(&d);
    }

    // A reduced-size Bayesian fit flows into the record with diagnostics
    // and squared errors.
    #[test]
    fn bayes_record_is_populated() {
        let d = tmpdir("bayes");
        let mut c = test_config(&d, DesignKind::Simple, Family::Gaussian, 1);
        c.fit_bayes = true;
        c.fit_freq = false;
        c.nuts = NutsConfig { chains: 2, warmup: 150, draws: 80, delta: 0.9, max_depth: 10 };
        let recs = run_experiment(&c).unwrap();
        let b = recs[0].bayes.as_ref().expect("bayes enabled");
        assert!(b.error.is_none(), "fit failed: {:?}", b.error);
        assert!(b.divergences.is_some());
        assert!(b.max_rhat.is_some());
        let est = b.estimates.as_ref().unwrap();
        assert_eq!(est.beta.len(), 2);
        assert_eq!(est.factors.len(), 2);
        assert!(est.sigma_eps.unwrap() > 0.0);
        assert!(b.squared_errors.is_some());
        assert!(recs[0].freq.is_none());
        let _ = fs::remove_dir_all(&d);
    }

    // [TRIVIAL] config invariants.
    #[test]
    fn config_validation() {
        let d = tmpdir("valid");
        let mut c = test_config(&d, DesignKind::Simple, Family::Gaussian, 1);
        c.n_sims = 0;
        assert!(run_experiment(&c).is_err());
        c.n_sims = 1;
        c.tol = 0.0;
        assert!(run_experiment(&c).is_err());
        c.tol = 0.01;
        c.parallelism = 0;
        assert!(run_experiment(&c).is_err());
        let _ = fs::remove_dir_all(&d);
    }

    // read_run round-trips header and records.
    #[test]
    fn read_run_roundtrip() {
        let d = tmpdir("roundtrip");
        let c = test_config(&d, DesignKind::Simple, Family::Logistic, 4);
        let recs = run_experiment(&c).unwrap();
        let (header, back) = read_run(&d).unwrap();
        assert_eq!(header.config.n_sims, 4);
        assert_eq!(header.format_version, FORMAT_VERSION);
        assert!(header.created_unix_s.is_none(), "canonical times omit the timestamp");
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.sim_id, b.sim_id);
            assert_eq!(a.truth, b.truth);
        }
        let _ = fs::remove_dir_all(&d);
    }
}
