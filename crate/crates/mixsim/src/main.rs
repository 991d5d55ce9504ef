//! Command-line front end: run simulation experiments, tabulate finished
//! runs, and inspect individual datasets.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mixsim::balance::dataset_balance;
use mixsim::bayesfit::NutsConfig;
use mixsim::design::{model_matrices, Dataset, ItemManipulation, RandomEffectsSpec, X1Level};
use mixsim::diagnostics::classify_frequentist_convergence;
use mixsim::freqfit::{fit_glmm_logistic, fit_lmm};
use mixsim::report::{
    balance_rows_to_csv, error_by_balance, nonconvergence_rates, rank_deficiency_table,
    rank_logistic_regression,
};
use mixsim::runner::{
    read_run, resume_experiment, run_experiment, DesignKind, ExperimentConfig, SimRecord,
};
use mixsim::truemodel::Family;
use mixsim::Result;

#[derive(Parser)]
#[command(name = "mixsim", version, about = "Mixed-effects estimation stress tester")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation experiment, streaming one JSON record per dataset.
    Simulate(SimulateArgs),
    /// Aggregate a finished run into a result table on stdout.
    Report(ReportArgs),
    /// Print the balance summary of a dataset CSV.
    Balance {
        /// Dataset CSV (columns subject,item,x1,x2,y as applicable).
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit one maximal mixed model to a dataset CSV and print the outcome.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Gradient tolerance for the convergence label.
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Simple,
    Complex,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Logistic,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FitterArg {
    Freq,
    Bayes,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    /// Non-convergence proportion per design, family, and fitter.
    Rates,
    /// Full vs rank-deficient covariance estimates by family.
    Rank,
    /// Logistic regression of rank deficiency on model descriptors.
    RankRegression,
    /// Estimation error and non-convergence binned by balance.
    ErrorByBalance,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    design: DesignArg,
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long)]
    n_sims: u64,
    /// Base seed; record i is fully determined by (seed, i).
    #[arg(long)]
    seed: u64,
    /// Gradient tolerance used for the convergence labels written into
    /// records (re-tabulate later at any tolerance with `report --tol`).
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    /// Which fitters to run on each dataset.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "freq")]
    fit: Vec<FitterArg>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: MIXSIM_WORKERS env var, else 1).
    #[arg(long)]
    workers: Option<usize>,
    /// Continue an interrupted run instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Zero out wall-time fields and omit the creation timestamp so that
    /// repeated runs are byte-identical.
    #[arg(long)]
    canonical_times: bool,
    /// Write posterior draws to <out>/draws/sim_<id>.csv.
    #[arg(long)]
    dump_draws: bool,
    #[arg(long, default_value_t = 3)]
    nuts_chains: usize,
    #[arg(long, default_value_t = 1000)]
    nuts_warmup: usize,
    #[arg(long, default_value_t = 1000)]
    nuts_draws: usize,
    #[arg(long, default_value_t = 0.99)]
    nuts_delta: f64,
    #[arg(long, default_value_t = 10)]
    nuts_max_depth: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories of finished `simulate` runs; several (comma-separated
    /// or repeated) are pooled, which the rank regression needs since a
    /// single run holds only one family.
    #[arg(long = "in", value_delimiter = ',', required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    table: TableArg,
    /// Balance bins for error-by-balance.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Gradient tolerance for re-classifying frequentist fits
    /// (default: the tolerance recorded in the run header).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Report(args) => report(args),
        Command::Balance { data } => balance(&data),
        Command::Fit { data, family, tol } => fit(&data, family.into(), tol),
    }
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Gaussian => Family::Gaussian,
            FamilyArg::Logistic => Family::Logistic,
        }
    }
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> DesignKind {
        match d {
            DesignArg::Simple => DesignKind::Simple,
            DesignArg::Complex => DesignKind::Complex,
        }
    }
}

fn env_workers() -> usize {
    std::env::var("MIXSIM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = ExperimentConfig {
        design: args.design.into(),
        family: args.family.into(),
        n_sims: args.n_sims,
        base_seed: args.seed,
        tol: args.tol,
        fit_freq: args.fit.contains(&FitterArg::Freq),
        fit_bayes: args.fit.contains(&FitterArg::Bayes),
        output_dir: args.out,
        parallelism: args.workers.unwrap_or_else(env_workers),
        nuts: NutsConfig {
            chains: args.nuts_chains,
            warmup: args.nuts_warmup,
            draws: args.nuts_draws,
            delta: args.nuts_delta,
            max_depth: args.nuts_max_depth,
        },
        canonical_times: args.canonical_times,
        dump_draws: args.dump_draws,
    };
    let records = if args.resume {
        resume_experiment(&config)?
    } else {
        run_experiment(&config)?
    };
    let freq_bad = records
        .iter()
        .filter(|r| r.freq.as_ref().is_some_and(|f| !f.converged))
        .count();
    let bayes_bad = records
        .iter()
        .filter(|r| r.bayes.as_ref().is_some_and(|b| !b.converged))
        .count();
    let n_freq = records.iter().filter(|r| r.freq.is_some()).count();
    let n_bayes = records.iter().filter(|r| r.bayes.is_some()).count();
    println!(
        "{} records in {}",
        records.len(),
        config.output_dir.display()
    );
    if n_freq > 0 {
        println!("frequentist unconverged: {freq_bad}/{n_freq}");
    }
    if n_bayes > 0 {
        println!("bayesian unconverged: {bayes_bad}/{n_bayes}");
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut records: Vec<SimRecord> = Vec::new();
    let mut header_tols = Vec::new();
    for dir in &args.input {
        let (header, recs) = read_run(dir)?;
        header_tols.push(header.config.tol);
        records.extend(recs);
    }
    let tol = match args.tol {
        Some(t) => t,
        None => {
            let t = header_tols[0];
            if header_tols.iter().any(|h| *h != t) {
                return Err(mixsim::Error::InvalidParameter(
                    "pooled runs disagree on the recorded tolerance; pass --tol explicitly"
                        .into(),
                ));
            }
            t
        }
    };
    let out = match (args.table, args.format) {
        (TableArg::Rates, FormatArg::Csv) => nonconvergence_rates(&records, tol)?.to_csv(),
        (TableArg::Rates, FormatArg::Json) => {
            pretty(&nonconvergence_rates(&records, tol)?)?
        }
        (TableArg::Rank, FormatArg::Csv) => rank_deficiency_table(&records, tol).to_csv(),
        (TableArg::Rank, FormatArg::Json) => pretty(&rank_deficiency_table(&records, tol))?,
        (TableArg::RankRegression, FormatArg::Csv) => {
            rank_logistic_regression(&records, tol)?.to_csv()
        }
        (TableArg::RankRegression, FormatArg::Json) => {
            pretty(&rank_logistic_regression(&records, tol)?)?
        }
        (TableArg::ErrorByBalance, FormatArg::Csv) => {
            balance_rows_to_csv(&error_by_balance(&records, args.bins, tol)?)
        }
        (TableArg::ErrorByBalance, FormatArg::Json) => {
            pretty(&error_by_balance(&records, args.bins, tol)?)?
        }
    };
    print!("{out}");
    if !out.ends_with('\n') {
        println!();
    }
    Ok(())
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn balance(path: &PathBuf) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let ds = Dataset::read_csv(file)?;
    let summary = dataset_balance(&ds)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Maximal random-effects specification implied by the dataset shape: item
/// column present means the crossed subjects-by-items design (manipulation
/// inferred from whether any item appears under both x1 levels), otherwise
/// the grouped design with subject slopes.
fn infer_spec(ds: &Dataset) -> RandomEffectsSpec {
    if ds.item.is_none() {
        return RandomEffectsSpec::maximal_complex();
    }
    let items = ds.item.as_ref().expect("item column");
    let n_items = ds.n_items.unwrap_or_else(|| items.iter().max().map_or(0, |m| m + 1));
    let mut seen_a = vec![false; n_items];
    let mut seen_b = vec![false; n_items];
    for (&it, &x1) in items.iter().zip(&ds.x1) {
        match x1 {
            X1Level::A => seen_a[it] = true,
            X1Level::B => seen_b[it] = true,
        }
    }
    let within = seen_a.iter().zip(&seen_b).any(|(&a, &b)| a && b);
    RandomEffectsSpec::maximal_simple(if within {
        ItemManipulation::WithinItem
    } else {
        ItemManipulation::BetweenItem
    })
}

fn fit(path: &PathBuf, family: Family, tol: f64) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let ds = Dataset::read_csv(file)?;
    let y = ds.y.clone().ok_or_else(|| {
        mixsim::Error::InvalidParameter("dataset has no response column y".into())
    })?;
    let spec = infer_spec(&ds);
    let matrices = model_matrices(&ds, &spec)?;
    let outcome = match family {
        Family::Gaussian => fit_lmm(&matrices, &y)?,
        Family::Logistic => fit_glmm_logistic(&matrices, &y)?,
    };
    let status = classify_frequentist_convergence(&outcome, tol);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "fit": outcome,
            "convergence": status,
        }))?
    );
    Ok(())
}
