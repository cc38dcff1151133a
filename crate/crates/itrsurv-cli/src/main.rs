//! Command-line front end for simulation experiments: simulate cohorts,
//! run replicated experiments with crash resume, summarize result
//! directories, and print the true values behind each scenario.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use itrsurv::dgp::{
    generate_cohort, oracle_covariates, CovariateModel, OracleTable, ScenarioSpec,
};
use itrsurv::harness::{
    run_experiment, summarize, write_cohort_csv, write_summary, ExperimentConfig, SummaryRow,
};
use itrsurv::model::TreatmentRule;
use itrsurv::rules::FitMode;
use itrsurv::stream;
use itrsurv::value::ValueEstimator;

#[derive(Parser)]
#[command(
    name = "itrsurv",
    version,
    about = "Simulation experiments for individualized treatment rules \
             under right-censored survival outcomes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one cohort and write it as CSV (columns z,delta,a,x1..).
    Generate(GenerateArgs),
    /// Run a replicated experiment into an output directory.
    Run(RunArgs),
    /// Summarize an experiment's output directory.
    Summarize(SummarizeArgs),
    /// Print true values, regrets, and the treatment effect per scenario.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in scenario id (0-3).
    #[arg(long, conflicts_with = "scenario_file")]
    scenario: Option<u8>,
    /// Scenario description as a TOML file instead of a built-in id.
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    /// Covariate model as a TOML file; defaults to the built-in model.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Cohort size.
    #[arg(long, default_value_t = 2500)]
    n: usize,
    /// Seed for the cohort's own random stream.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config TOML; flags below override its fields, and
    /// fields absent from both fall back to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<u8>>,
    /// Cohort size per replication.
    #[arg(long)]
    n: Option<usize>,
    /// Replications per scenario.
    #[arg(long)]
    replications: Option<u64>,
    /// Folds for cross-fitted modes.
    #[arg(long)]
    folds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Method ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Modes to run every method in (whole, crossfit).
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<FitMode>>,
    /// Value estimator for scoring fitted rules (v1, v2, v3).
    #[arg(long)]
    value_estimator: Option<ValueEstimator>,
    /// Fresh covariate draws behind each scenario's oracle values.
    #[arg(long)]
    oracle_draws: Option<usize>,
    /// Ensemble candidate method ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    ensemble: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; any value yields identical output files.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Experiment output directory.
    dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Scenario ids, comma separated; all built-ins when omitted.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<u8>>,
    /// Fresh covariate draws per scenario.
    #[arg(long, default_value_t = 200_000)]
    draws: usize,
    /// Seed for the oracle draw streams.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::Run(args) => run(args),
        Command::Summarize(args) => run_summarize(args),
        Command::Oracle(args) => oracle(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let scenario = match (&args.scenario, &args.scenario_file) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ScenarioSpec::from_toml_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        (id, None) => {
            let id = id.unwrap_or(0);
            ScenarioSpec::builtin(id)
                .with_context(|| format!("unknown scenario id {id} (built-ins are 0-3)"))?
        }
    };
    let model = match &args.covariates {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            CovariateModel::from_toml_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => CovariateModel::default(),
    };
    let mut rng = stream::derive_rng(args.seed, &[stream::DATA]);
    let generated = generate_cohort(&scenario, &model, args.n, &mut rng)?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            write_cohort_csv(&generated.cohort, file)?;
        }
        None => write_cohort_csv(&generated.cohort, io::stdout().lock())?,
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(scenarios) = args.scenarios {
        config.scenarios = scenarios;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(replications) = args.replications {
        config.replications = replications;
    }
    if let Some(folds) = args.folds {
        config.folds = folds;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(methods) = args.methods {
        config.methods = methods;
    }
    if let Some(modes) = args.modes {
        config.modes = modes;
    }
    if let Some(estimator) = args.value_estimator {
        config.value_estimator = estimator;
    }
    if let Some(draws) = args.oracle_draws {
        config.oracle_draws = draws;
    }
    if let Some(ensemble) = args.ensemble {
        config.ensemble = ensemble;
    }
    if let Some(output) = args.output {
        config.output = output;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    config.validate()?;

    let report = run_experiment(&config)?;
    println!(
        "ran {} replication(s), skipped {} already on disk",
        report.completed_pairs, report.skipped_pairs
    );
    println!("rows: {}   failures: {}", report.rows, report.failures);
    println!("replications: {}", report.replications_csv.display());
    println!("summary:      {}", report.summary_csv.display());
    println!("manifest:     {}", report.manifest_json.display());
    println!("wall time: {:.1}s", report.wall_seconds);
    Ok(())
}

fn run_summarize(args: SummarizeArgs) -> Result<()> {
    let summary = summarize(&args.dir)?;
    let path = write_summary(&args.dir, &summary)?;
    print_summary(&summary, io::stdout().lock())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn print_summary<W: Write>(summary: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<9} {:<15} {:<9} {:<18} {:>5} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "scenario", "method", "mode", "metric", "n", "mean", "sd", "min", "q1", "median",
        "q3", "max"
    )?;
    for row in summary {
        writeln!(
            out,
            "{:<9} {:<15} {:<9} {:<18} {:>5} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.scenario,
            row.method,
            row.mode,
            row.metric,
            row.n,
            row.mean,
            row.sd,
            row.min,
            row.q1,
            row.median,
            row.q3,
            row.max
        )?;
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let scenarios = args.scenarios.unwrap_or_else(|| vec![0, 1, 2, 3]);
    let model = CovariateModel::default();
    println!(
        "{:<9} {:>9} {:>11} {:>11} {:>9} {:>9} {:>9}",
        "scenario", "v_opt", "v_static_0", "v_static_1", "regret_0", "regret_1", "ate"
    );
    for id in scenarios {
        let scenario = ScenarioSpec::builtin(id)
            .with_context(|| format!("unknown scenario id {id} (built-ins are 0-3)"))?;
        let mut rng = stream::derive_rng(args.seed, &[stream::ORACLE, u64::from(id)]);
        let draws = oracle_covariates(&model, args.draws, &mut rng)?;
        let table = OracleTable::new(&scenario, draws)?;
        let v0 = table.value_of(&TreatmentRule::Static(0))?;
        let v1 = table.value_of(&TreatmentRule::Static(1))?;
        let v_opt = table.optimal_value();
        println!(
            "{:<9} {:>9.4} {:>11.4} {:>11.4} {:>9.4} {:>9.4} {:>9.4}",
            id,
            v_opt,
            v0,
            v1,
            v_opt - v0,
            v_opt - v1,
            v1 - v0
        );
    }
    Ok(())
}
