//! Acceptance gate: one integration test per criterion the toolkit commits
//! to, so the harness prints one pass/fail line per criterion. Each test
//! also emits a `criterion NN ... PASS` summary on stderr (visible with
//! `--nocapture`).
//!
//! The desk-scale criteria (04-07) share four cached frequentist sweeps of
//! 200 simulations per design × family cell at a fixed seed. On a single
//! core the default gate takes roughly half an hour, dominated by the
//! logistic cells; everything else finishes in seconds. Sweeps land in a
//! fresh per-process temp directory by default. Set
//! `MIXSIM_TEST_CACHE=/some/dir` to keep finished sweeps across
//! invocations while iterating on reporting code; delete that directory
//! after touching generation or fitting code, since cached records are
//! reused as-is.
//!
//! `criterion_04_nonconvergence_trend_with_bayes` repeats the sweep with
//! the posterior sampler enabled (800 NUTS fits, dominated by the 400
//! complex-cell fits). That takes hours on one core and is ignored by
//! default; run it with
//!
//! ```text
//! cargo test --test acceptance -- --ignored --test-threads=1 --nocapture
//! ```

use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use mixsim::balance::{balance_measure, ContingencyTable};
use mixsim::bayesfit::{
    ess, nuts_run_model, nuts_sample, split_rhat, BayesModel, LogDensity, NutsConfig,
};
use mixsim::design::{
    gen_complex_design, gen_simple_design, model_matrices, GroupingFactor, ModelMatrices,
    RandomEffectsSpec, SimpleDesignConfig, ZFactorBlock, ZMatrix,
};
use mixsim::diagnostics::{
    classify_convergence_parts, ConvergenceParts, RankKind, RankStatus,
};
use mixsim::freqfit::{
    fit_glm_logistic, fit_lmm, glmm_laplace_deviance, standardize_response, ThetaParam,
};
use mixsim::report::{
    nonconvergence_rates, rank_deficiency_table, rank_logistic_regression, Fitter,
};
use mixsim::runner::{
    resume_experiment, simple_condition, DesignKind, ExperimentConfig, FreqFitRecord, ParamFactor,
    ParamSet, SimRecord,
};
use mixsim::stochastic::RngStream;
use mixsim::truemodel::{
    extreme_fraction, generate_response, linear_predictor, sample_gamma, sample_true_complex,
    sample_true_simple, Family,
};

/// Shared desk-scale sweep settings: 200 simulations per cell at one seed,
/// classified at the headline gradient tolerance.
const SEED: u64 = 42;
const N_SIMS: u64 = 200;
const TOL: f64 = 0.01;

fn workspace_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| match std::env::var("MIXSIM_TEST_CACHE") {
        Ok(d) if !d.is_empty() => PathBuf::from(d),
        _ => std::env::temp_dir().join(format!("mixsim-acceptance-{}", std::process::id())),
    })
}

fn cell_config(design: DesignKind, family: Family, bayes: bool) -> ExperimentConfig {
    let label = format!(
        "{}-{}{}",
        match design {
            DesignKind::Simple => "simple",
            DesignKind::Complex => "complex",
        },
        match family {
            Family::Gaussian => "gaussian",
            Family::Logistic => "logistic",
        },
        if bayes { "-bayes" } else { "" }
    );
    ExperimentConfig {
        design,
        family,
        n_sims: N_SIMS,
        base_seed: SEED,
        tol: TOL,
        fit_freq: true,
        fit_bayes: bayes,
        output_dir: workspace_dir().join(label),
        parallelism: std::thread::available_parallelism().map_or(1, |p| p.get()),
        nuts: NutsConfig::default(),
        canonical_times: true,
        dump_draws: false,
    }
}

fn run_cell(design: DesignKind, family: Family, bayes: bool) -> Vec<SimRecord> {
    resume_experiment(&cell_config(design, family, bayes)).expect("cell sweep failed")
}

fn cell_simple_gaussian() -> &'static [SimRecord] {
    static C: OnceLock<Vec<SimRecord>> = OnceLock::new();
    C.get_or_init(|| run_cell(DesignKind::Simple, Family::Gaussian, false))
}

fn cell_simple_logistic() -> &'static [SimRecord] {
    static C: OnceLock<Vec<SimRecord>> = OnceLock::new();
    C.get_or_init(|| run_cell(DesignKind::Simple, Family::Logistic, false))
}

fn cell_complex_gaussian() -> &'static [SimRecord] {
    static C: OnceLock<Vec<SimRecord>> = OnceLock::new();
    C.get_or_init(|| run_cell(DesignKind::Complex, Family::Gaussian, false))
}

fn cell_complex_logistic() -> &'static [SimRecord] {
    static C: OnceLock<Vec<SimRecord>> = OnceLock::new();
    C.get_or_init(|| run_cell(DesignKind::Complex, Family::Logistic, false))
}

fn freq_rate(records: &[SimRecord], tol: f64) -> f64 {
    let table = nonconvergence_rates(records, tol).expect("rate tabulation failed");
    let r = &records[0];
    table
        .rate(r.design, r.family, Fitter::Frequentist)
        .expect("missing frequentist row")
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean_of(xs);
    xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// 01: balance-measure oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_balance_measure_oracles() {
    // [PAPER] hand-evaluated 2×3 tables: equal counts score exactly 1;
    // (4,2,2,2,2,0) scores 250/319 ≈ 0.78370; (6,0,0,0,0,0) concentrates
    // everything in one cell and scores 2/7 ≈ 0.28571.
    let cases: [(&[u64], f64); 3] = [
        (&[2, 2, 2, 2, 2, 2], 1.0),
        (&[4, 2, 2, 2, 2, 0], 250.0 / 319.0),
        (&[6, 0, 0, 0, 0, 0], 2.0 / 7.0),
    ];
    for (counts, expect) in cases {
        let table = ContingencyTable::from_counts(vec![1, 2, 3], counts.to_vec()).unwrap();
        let b = balance_measure(&table).unwrap().b;
        assert!(
            (b - expect).abs() < 1e-9,
            "counts {counts:?}: B = {b}, want {expect}"
        );
    }
    eprintln!("criterion 01 balance oracle: PASS (three hand-computed tables within 1e-9)");
}

// ---------------------------------------------------------------------------
// 02: complex logistic true models rarely produce extreme log-odds
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_complex_logistic_models_rarely_extreme() {
    // [PAPER] at least 95% of 1000 freshly sampled complex logistic true
    // models keep the share of |log-odds| > 5 under 1%.
    let mut ok = 0usize;
    for sim_id in 1..=1000u64 {
        let mut rng = RngStream::new(4242, sim_id);
        let ds = gen_complex_design(&mut rng);
        let m = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
        let truth = sample_true_complex(Family::Logistic, &mut rng);
        let model = sample_gamma(&truth, &m.z, &mut rng).unwrap();
        let eta = linear_predictor(&m, &model).unwrap();
        if extreme_fraction(eta.as_slice()).unwrap() < 0.01 {
            ok += 1;
        }
    }
    assert!(ok >= 950, "only {ok}/1000 models kept extreme share < 1%");
    eprintln!("criterion 02 extreme-value rarity: PASS ({ok}/1000 models under 1% extreme)");
}

// ---------------------------------------------------------------------------
// 03: simple logistic datasets have tiny mean extreme share
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_simple_logistic_mean_extreme_share() {
    // [PAPER] across 1000 simple logistic datasets, rotating through the
    // eight design conditions like the runner, the mean share of
    // |log-odds| > 5 lies in [0, 0.005].
    let mut total = 0.0;
    for sim_id in 1..=1000u64 {
        let mut rng = RngStream::new(2424, sim_id);
        let cond = simple_condition(sim_id);
        let cfg =
            SimpleDesignConfig::new(cond.n_items, cond.item_manipulation, cond.h0_true).unwrap();
        let ds = gen_simple_design(&cfg, &mut rng);
        let spec = RandomEffectsSpec::maximal_simple(cond.item_manipulation);
        let m = model_matrices(&ds, &spec).unwrap();
        let truth =
            sample_true_simple(Family::Logistic, cond.h0_true, cond.item_manipulation, &mut rng);
        let model = sample_gamma(&truth, &m.z, &mut rng).unwrap();
        let eta = linear_predictor(&m, &model).unwrap();
        total += extreme_fraction(eta.as_slice()).unwrap();
    }
    let mean = total / 1000.0;
    assert!(
        (0.0..=0.005).contains(&mean),
        "mean extreme share {mean} outside [0, 0.005]"
    );
    eprintln!("criterion 03 simple logistic extreme mean: PASS (mean share = {mean:.5})");
}

// ---------------------------------------------------------------------------
// 04: non-convergence trend across the four design × family cells
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_nonconvergence_trend_frequentist() {
    // [PAPER] frequentist non-convergence at the desk scale orders the way
    // the published grid does: near zero for simple Gaussian, moderate for
    // complex Gaussian, dominant for complex logistic.
    let sg = freq_rate(cell_simple_gaussian(), TOL);
    let sl = freq_rate(cell_simple_logistic(), TOL);
    let cg = freq_rate(cell_complex_gaussian(), TOL);
    let cl = freq_rate(cell_complex_logistic(), TOL);

    assert!(sg <= 0.02, "simple gaussian rate {sg} exceeds 2%");
    assert!(
        (0.05..=0.35).contains(&cg),
        "complex gaussian rate {cg} outside [5%, 35%]"
    );
    assert!(cl > 0.5, "complex logistic rate {cl} not above 50%");
    assert!(
        cl > cg,
        "complex logistic rate {cl} not above complex gaussian rate {cg}"
    );
    eprintln!(
        "criterion 04 non-convergence trend (frequentist): PASS \
         (simple {:.1}%/{:.1}%, complex {:.1}%/{:.1}% for gaussian/logistic)",
        100.0 * sg,
        100.0 * sl,
        100.0 * cg,
        100.0 * cl
    );
}

#[test]
#[ignore = "800 NUTS fits take hours on one core; run with --ignored --test-threads=1"]
fn criterion_04_nonconvergence_trend_with_bayes() {
    // [PAPER] the Bayesian fitter stays under 5% non-convergence in every
    // cell while the frequentist rates keep the published ordering. The
    // sweeps rerun with the sampler enabled; runtime is dominated by the
    // 400 NUTS fits of the two complex cells.
    let cells = [
        (DesignKind::Simple, Family::Gaussian, "simple gaussian"),
        (DesignKind::Simple, Family::Logistic, "simple logistic"),
        (DesignKind::Complex, Family::Gaussian, "complex gaussian"),
        (DesignKind::Complex, Family::Logistic, "complex logistic"),
    ];
    let mut freq = Vec::new();
    let mut bayes = Vec::new();
    for (design, family, label) in cells {
        let records = run_cell(design, family, true);
        let table = nonconvergence_rates(&records, TOL).unwrap();
        let f = table.rate(design, family, Fitter::Frequentist).unwrap();
        let b = table.rate(design, family, Fitter::Bayesian).unwrap();
        assert!(b < 0.05, "{label}: Bayesian non-convergence {b} reaches 5%");
        freq.push(f);
        bayes.push(b);
        eprintln!("  {label}: frequentist {:.1}%, bayesian {:.1}%", 100.0 * f, 100.0 * b);
    }
    assert!(freq[0] <= 0.02);
    assert!((0.05..=0.35).contains(&freq[2]));
    assert!(freq[3] > 0.5 && freq[3] > freq[2]);
    eprintln!(
        "criterion 04 non-convergence trend (with bayes): PASS (max bayesian rate {:.1}%)",
        100.0 * bayes.iter().cloned().fold(0.0, f64::max)
    );
}

// ---------------------------------------------------------------------------
// 05: tightening the tolerance never reconverges a fit
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_tighter_tolerance_never_reconverges() {
    // [PAPER] re-classifying the complex logistic sweep at tol = 0.002
    // yields a non-convergence rate at least the tol = 0.01 rate, and the
    // per-fit labels are exactly monotone: converged at the tight
    // tolerance implies converged at the loose one.
    let records = cell_complex_logistic();
    let loose = freq_rate(records, 0.01);
    let strict = freq_rate(records, 0.002);
    assert!(
        strict >= loose,
        "rate at tol 0.002 ({strict}) below rate at tol 0.01 ({loose})"
    );
    for rec in records {
        let f = rec.freq.as_ref().expect("frequentist fit missing");
        let tight = classify_convergence_parts(&f.parts, 0.002).converged;
        let wide = classify_convergence_parts(&f.parts, 0.01).converged;
        assert!(
            !tight || wide,
            "sim {}: converged at 0.002 but not at 0.01",
            rec.sim_id
        );
    }
    eprintln!(
        "criterion 05 tolerance monotonicity: PASS ({:.1}% at 0.002 >= {:.1}% at 0.01)",
        100.0 * strict,
        100.0 * loose
    );
}

// ---------------------------------------------------------------------------
// 06: rank deficiency concentrates in the logistic family
// ---------------------------------------------------------------------------

/// Minimal record with just the fields the rank tables read: family,
/// convergence ingredients, and a rank label.
fn rank_replay_record(
    sim_id: u64,
    family: Family,
    max_grad: f64,
    rank: Option<RankKind>,
) -> SimRecord {
    let parts = ConvergenceParts {
        max_grad: Some(max_grad),
        objective: Some(100.0),
        psd_ok: true,
        optimizer_ok: true,
        n_params: 10,
        n_obs: 500,
    };
    let converged = classify_convergence_parts(&parts, TOL).converged;
    SimRecord {
        sim_id,
        design: DesignKind::Complex,
        family,
        condition: None,
        s: 40,
        n: 500,
        balance: Some(0.9),
        min_variance: 0.25,
        total_correlation: 0.5,
        extreme_fraction: None,
        truth: ParamSet {
            beta: vec![0.0],
            factors: vec![ParamFactor { sigma: vec![0.5], omega_lower: vec![] }],
            sigma_eps: None,
        },
        freq: Some(FreqFitRecord {
            converged,
            reasons: vec![],
            parts,
            boundary: false,
            estimates: None,
            squared_errors: None,
            rank: rank.map(|status| RankStatus {
                status,
                components_needed: if status == RankKind::Full { 6 } else { 4 },
            }),
            error: None,
            wall_time_s: 0.0,
        }),
        bayes: None,
        wall_time_s: 0.0,
    }
}

#[test]
fn criterion_06_rank_deficiency_family_ordering() {
    // [PAPER] among converged frequentist complex fits the logistic family
    // is rank-deficient more often than the Gaussian family, with at least
    // 100 converged Gaussian fits backing the comparison.
    let mut pooled: Vec<SimRecord> = cell_complex_gaussian().to_vec();
    pooled.extend_from_slice(cell_complex_logistic());
    let table = rank_deficiency_table(&pooled, TOL);
    let gaussian_n = table.gaussian_full + table.gaussian_deficient;
    let logistic_n = table.logistic_full + table.logistic_deficient;
    assert!(
        gaussian_n >= 100,
        "only {gaussian_n} converged gaussian fits with a rank label"
    );
    assert!(logistic_n > 0, "no converged logistic fits with a rank label");
    let g_share = table.deficient_share(Family::Gaussian).unwrap();
    let l_share = table.deficient_share(Family::Logistic).unwrap();
    assert!(
        l_share > g_share,
        "logistic deficiency share {l_share} not above gaussian share {g_share}"
    );

    // [PAPER] replaying the published counts cell-for-cell: 469 of 864
    // converged Gaussian fits deficient, 173 of 177 logistic.
    let mut replay = Vec::new();
    let mut id = 0u64;
    let mut push = |family, n, rank| {
        for _ in 0..n {
            id += 1;
            replay.push(rank_replay_record(id, family, 1e-6, Some(rank)));
        }
    };
    push(Family::Gaussian, 395, RankKind::Full);
    push(Family::Gaussian, 469, RankKind::Deficient);
    push(Family::Logistic, 4, RankKind::Full);
    push(Family::Logistic, 173, RankKind::Deficient);
    let published = rank_deficiency_table(&replay, TOL);
    assert_eq!(published.gaussian_full, 395);
    assert_eq!(published.gaussian_deficient, 469);
    assert_eq!(published.logistic_full, 4);
    assert_eq!(published.logistic_deficient, 173);

    eprintln!(
        "criterion 06 rank-deficiency ordering: PASS \
         (gaussian {}/{} = {:.3}, logistic {}/{} = {:.3}; published counts replayed)",
        table.gaussian_deficient, gaussian_n, g_share, table.logistic_deficient, logistic_n, l_share
    );
}

// ---------------------------------------------------------------------------
// 07: what predicts rank deficiency: signs of the pooled regression
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_rank_regression_signs() {
    // [PAPER] regressing the deficiency indicator of converged complex fits
    // on family and the scaled truth summaries recovers the published
    // signs: harder-to-estimate truths (small minimum variance, heavy
    // correlation mass) and less balanced designs are more often deficient.
    let mut pooled: Vec<SimRecord> = cell_complex_gaussian().to_vec();
    pooled.extend_from_slice(cell_complex_logistic());
    let reg = rank_logistic_regression(&pooled, TOL).expect("rank regression failed");
    let mv = reg.term("min_variance_scaled").unwrap();
    let bal = reg.term("balance_scaled").unwrap();
    let tc = reg.term("total_correlation_scaled").unwrap();
    assert!(
        mv.estimate < 0.0,
        "min_variance coefficient {} not negative",
        mv.estimate
    );
    assert!(bal.estimate < 0.0, "balance coefficient {} not negative", bal.estimate);
    assert!(
        tc.estimate > 0.0,
        "total_correlation coefficient {} not positive",
        tc.estimate
    );
    eprintln!(
        "criterion 07 rank-regression signs: PASS \
         (n = {}, min_variance {:+.3}, balance {:+.3}, total_correlation {:+.3})",
        reg.n, mv.estimate, bal.estimate, tc.estimate
    );
}

// ---------------------------------------------------------------------------
// 08: closed-form fitter oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_fitter_oracles() {
    // (a) [DERIVED] balanced one-way layout: REML variance components have
    // the classical mean-square closed form.
    let s = 24usize;
    let m_per = 5usize;
    let n = s * m_per;
    let mut rng = RngStream::new(1909, 0);
    let mut y = Vec::with_capacity(n);
    let mut subject = Vec::with_capacity(n);
    for g in 0..s {
        let b = 0.8 * rng.standard_normal();
        for _ in 0..m_per {
            subject.push(g);
            y.push(1.5 + b + 0.6 * rng.standard_normal());
        }
    }
    let x = DMatrix::from_element(n, 1, 1.0);
    let z = ZMatrix {
        n,
        q: s,
        factors: vec![ZFactorBlock {
            grouping: GroupingFactor::Subject,
            n_groups: s,
            k: 1,
            col_offset: 0,
            group_of_obs: subject.clone(),
            vals: vec![1.0; n],
            effect_cols: vec![0],
        }],
    };
    let m = ModelMatrices { x, z };
    let fit = fit_lmm(&m, &y).unwrap();

    let (ys, _, _) = standardize_response(&y).unwrap();
    let grand = mean_of(&ys);
    let mut group_means = vec![0.0; s];
    for (i, &g) in subject.iter().enumerate() {
        group_means[g] += ys[i] / m_per as f64;
    }
    let msb = m_per as f64 * group_means.iter().map(|gm| (gm - grand).powi(2)).sum::<f64>()
        / (s as f64 - 1.0);
    let msw = subject
        .iter()
        .enumerate()
        .map(|(i, &g)| (ys[i] - group_means[g]).powi(2))
        .sum::<f64>()
        / (n - s) as f64;
    let sigma_u2 = (msb - msw) / m_per as f64;
    assert!(sigma_u2 > 0.0, "oracle must be interior for this seed");
    let sigma_u2_hat = fit.factors[0].sigma[0].powi(2);
    let sigma_e2_hat = fit.sigma_eps_hat.unwrap().powi(2);
    assert!(
        (sigma_u2_hat - sigma_u2).abs() <= 1e-4 * sigma_u2,
        "between-group variance {sigma_u2_hat} vs closed form {sigma_u2}"
    );
    assert!(
        (sigma_e2_hat - msw).abs() <= 1e-4 * msw,
        "residual variance {sigma_e2_hat} vs closed form {msw}"
    );

    // (b) [DERIVED] at θ = 0 the Laplace criterion is exactly the plain
    // logistic deviance, so the mixed fit's profile and the IRLS GLM agree:
    // the two functions coincide pointwise and the GLM solution is
    // stationary for both within 1e-6.
    let cond = simple_condition(1);
    let mut rng = RngStream::new(1910, 1);
    let cfg = SimpleDesignConfig::new(cond.n_items, cond.item_manipulation, false).unwrap();
    let ds = gen_simple_design(&cfg, &mut rng);
    let spec = RandomEffectsSpec::maximal_simple(cond.item_manipulation);
    let m = model_matrices(&ds, &spec).unwrap();
    let truth = sample_true_simple(Family::Logistic, false, cond.item_manipulation, &mut rng);
    let model = sample_gamma(&truth, &m.z, &mut rng).unwrap();
    let yb: Vec<f64> =
        generate_response(&m, &model, &mut rng).unwrap().iter().copied().collect();

    let ks: Vec<usize> = m.z.factors.iter().map(|f| f.k).collect();
    let theta0 = ThetaParam::zeros(&ks);
    let glm = fit_glm_logistic(&m.x, &yb).unwrap();
    let p = glm.beta.len();
    let bernoulli_deviance = |beta: &[f64]| -> f64 {
        let mut d = 0.0;
        for i in 0..m.x.nrows() {
            let eta: f64 = (0..p).map(|j| m.x[(i, j)] * beta[j]).sum();
            // -2 log-likelihood in the numerically stable softplus form.
            let softplus = if eta > 30.0 { eta } else { (1.0 + eta.exp()).ln() };
            d += 2.0 * (softplus - yb[i] * eta);
        }
        d
    };
    for trial in 0..5 {
        let mut rb = RngStream::new(1911, trial);
        let beta: Vec<f64> = (0..p).map(|_| rb.uniform_range(-1.5, 1.5)).collect();
        let laplace = glmm_laplace_deviance(&theta0, &beta, &m, &yb).unwrap();
        let plain = bernoulli_deviance(&beta);
        assert!(
            (laplace - plain).abs() <= 1e-8 * (1.0 + plain.abs()),
            "theta = 0 criterion {laplace} differs from plain deviance {plain}"
        );
    }
    let d_hat = glmm_laplace_deviance(&theta0, &glm.beta, &m, &yb).unwrap();
    let h = 1e-5;
    for j in 0..p {
        let mut bp = glm.beta.clone();
        bp[j] += h;
        let mut bm = glm.beta.clone();
        bm[j] -= h;
        let fp = glmm_laplace_deviance(&theta0, &bp, &m, &yb).unwrap();
        let fm = glmm_laplace_deviance(&theta0, &bm, &m, &yb).unwrap();
        let grad = (fp - fm) / (2.0 * h);
        assert!(
            grad.abs() <= 1e-6 * (1.0 + d_hat.abs()),
            "coordinate {j}: gradient {grad} at the GLM solution"
        );
    }

    // (c) [DERIVED] two saturated cells with odds 1/3 and 1: the fitted
    // log odds ratio is exactly ln 3.
    let x2 = DMatrix::from_row_slice(8, 2, &[
        1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, //
        1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
    ]);
    let y2 = vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let two_cell = fit_glm_logistic(&x2, &y2).unwrap();
    let slope = two_cell.beta[1];
    assert!(
        (slope - 3.0f64.ln()).abs() < 1e-8,
        "slope {slope} vs ln 3 = {}",
        3.0f64.ln()
    );

    eprintln!(
        "criterion 08 fitter oracles: PASS \
         (one-way variances within 1e-4, theta = 0 matches the plain GLM, slope - ln 3 = {:.1e})",
        slope - 3.0f64.ln()
    );
}

// ---------------------------------------------------------------------------
// 09: sampler validation
// ---------------------------------------------------------------------------

/// Standard normal in d dimensions as an analytic sampler target.
struct StdNormal {
    dim: usize,
}

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp_grad(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let lp = -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        Some((lp, x.iter().map(|v| -v).collect()))
    }
}

#[test]
fn criterion_09_sampler_validation() {
    // [DERIVED] the analytic posterior gradient matches central differences
    // within 1e-6 relative at 100 random points, spread over a Gaussian
    // simple-design model and a logistic complex-design model.
    let make_model = |design: DesignKind, family: Family, seed: u64| -> BayesModel {
        let mut rng = RngStream::new(seed, 1);
        let (m, truth) = match design {
            DesignKind::Simple => {
                let cond = simple_condition(1);
                let cfg =
                    SimpleDesignConfig::new(cond.n_items, cond.item_manipulation, false).unwrap();
                let ds = gen_simple_design(&cfg, &mut rng);
                let spec = RandomEffectsSpec::maximal_simple(cond.item_manipulation);
                let m = model_matrices(&ds, &spec).unwrap();
                let truth =
                    sample_true_simple(family, false, cond.item_manipulation, &mut rng);
                (m, truth)
            }
            DesignKind::Complex => {
                let ds = gen_complex_design(&mut rng);
                let m = model_matrices(&ds, &RandomEffectsSpec::maximal_complex()).unwrap();
                let truth = sample_true_complex(family, &mut rng);
                (m, truth)
            }
        };
        let model = sample_gamma(&truth, &m.z, &mut rng).unwrap();
        let y: Vec<f64> =
            generate_response(&m, &model, &mut rng).unwrap().iter().copied().collect();
        BayesModel::new(&m, &y, family).unwrap()
    };
    let models = [
        make_model(DesignKind::Simple, Family::Gaussian, 3001),
        make_model(DesignKind::Complex, Family::Logistic, 3002),
    ];
    let mut rng = RngStream::new(3003, 0);
    let h = 1e-5;
    let mut points = 0usize;
    for model in &models {
        let dim = model.unconstrained_dim();
        for _ in 0..50 {
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-0.9, 0.9)).collect();
            let (_, grad) = model.log_posterior_and_gradient(&x).unwrap();
            for c in 0..dim {
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let (fp, _) = model.log_posterior_and_gradient(&xp).unwrap();
                let (fm, _) = model.log_posterior_and_gradient(&xm).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[c]).abs() <= 1e-6 * grad[c].abs().max(1.0),
                    "coordinate {c}: analytic {} vs finite difference {fd}",
                    grad[c]
                );
            }
            points += 1;
        }
    }
    assert_eq!(points, 100);

    // [DERIVED] a 10-d standard normal is recovered within 3 MCSE on every
    // mean and variance.
    let target = StdNormal { dim: 10 };
    let config = NutsConfig::default();
    let raw = nuts_sample(&target, &config, &RngStream::new(3004, 0)).unwrap();
    for j in 0..10 {
        let e = ess(&raw.draws, j);
        assert!(e > 100.0, "dimension {j}: effective sample size {e} too small");
        let all: Vec<f64> = raw
            .draws
            .iter()
            .flat_map(|c| c.iter().map(move |d| d[j]))
            .collect();
        let mean = mean_of(&all);
        let var = sample_var(&all);
        let mcse_mean = (var / e).sqrt();
        assert!(
            mean.abs() <= 3.0 * mcse_mean,
            "dimension {j}: mean {mean} vs MCSE {mcse_mean}"
        );
        let mcse_var = var * (2.0 / e).sqrt();
        assert!(
            (var - 1.0).abs() <= 3.0 * mcse_var,
            "dimension {j}: variance {var} vs MCSE {mcse_var}"
        );
        assert!(split_rhat(&raw.draws, j) < 1.02, "dimension {j} mixes poorly");
    }

    // [TRIVIAL] sampling the prior alone: the subject-factor σ draws center
    // on the half-normal mean √(2/π) within 3 MCSE.
    let model = BayesModel::prior_only(1, &[2], Family::Gaussian);
    let chains = nuts_run_model(&model, &config, &RngStream::new(3005, 0)).unwrap();
    let target_mean = (2.0 / std::f64::consts::PI).sqrt();
    let layout = chains.layout.clone();
    for j in 0..2 {
        let idx = layout.sigma_start(0) + j;
        let e = chains.ess(idx);
        let all: Vec<f64> = chains
            .draws
            .iter()
            .flat_map(|c| c.iter().map(move |d| d[idx]))
            .collect();
        assert!(all.iter().all(|v| *v > 0.0), "σ draw not positive");
        let mean = mean_of(&all);
        let mcse = (sample_var(&all) / e).sqrt();
        assert!(
            (mean - target_mean).abs() <= 3.0 * mcse,
            "σ[{j}] mean {mean} vs √(2/π) = {target_mean} (MCSE {mcse})"
        );
    }

    eprintln!(
        "criterion 09 sampler validation: PASS \
         (100 gradient points, 10-d normal moments, prior σ mean within 3 MCSE)"
    );
}

// ---------------------------------------------------------------------------
// 10: byte-identical records at any worker count
// ---------------------------------------------------------------------------

fn simulate_cli(args: &[&str], out: &PathBuf) {
    let output = Command::new(env!("CARGO_BIN_EXE_mixsim"))
        .arg("simulate")
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--canonical-times")
        .output()
        .expect("failed to launch the CLI");
    assert!(
        output.status.success(),
        "simulate {args:?} exited with {}: {}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
}

fn assert_same_records(a: &PathBuf, b: &PathBuf, label: &str) {
    let ra = std::fs::read(a.join("records.jsonl")).expect("first records file");
    let rb = std::fs::read(b.join("records.jsonl")).expect("second records file");
    if ra != rb {
        let first = ra.iter().zip(&rb).position(|(x, y)| x != y);
        panic!(
            "{label}: records differ (lengths {} vs {}, first differing byte {first:?})",
            ra.len(),
            rb.len()
        );
    }
}

#[test]
fn criterion_10_byte_identical_records_across_worker_counts() {
    // [TRIVIAL by construction, asserted end to end] with canonical times,
    // rerunning the same seed through the installed binary yields
    // byte-identical records regardless of worker count, for both designs
    // and with the sampler enabled.
    let base = workspace_dir().join("determinism");
    let cases: [(&str, &[&str]); 3] = [
        (
            "simple-gaussian",
            &["--design", "simple", "--family", "gaussian", "--n-sims", "8", "--seed", "97"],
        ),
        (
            "complex-logistic",
            &["--design", "complex", "--family", "logistic", "--n-sims", "4", "--seed", "98"],
        ),
        (
            "simple-gaussian-bayes",
            &[
                "--design", "simple", "--family", "gaussian", "--n-sims", "2", "--seed", "99",
                "--fit", "freq,bayes",
            ],
        ),
    ];
    for (label, args) in cases {
        let d1 = base.join(format!("{label}-w1"));
        let d3 = base.join(format!("{label}-w3"));
        let mut a1: Vec<&str> = args.to_vec();
        a1.extend_from_slice(&["--workers", "1"]);
        let mut a3: Vec<&str> = args.to_vec();
        a3.extend_from_slice(&["--workers", "3"]);
        simulate_cli(&a1, &d1);
        simulate_cli(&a3, &d3);
        assert_same_records(&d1, &d3, label);
    }
    eprintln!(
        "criterion 10 determinism: PASS (three configs byte-identical at 1 vs 3 workers)"
    );
}
