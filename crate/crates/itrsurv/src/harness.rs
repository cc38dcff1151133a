//! Experiment orchestration: a validated configuration, deterministic
//! replication runs over a worker pool, per-replication result files
//! with crash resume, and boxplot-ready summaries.
//!
//! An experiment is a grid: scenarios x replications x methods x modes.
//! Each (scenario, replication) pair simulates one cohort, fits the
//! nuisance models once, runs every configured method in every mode,
//! and scores the results against the generating process
//! ([`crate::metrics`]). Rows land in one fragment file per pair, so an
//! interrupted run resumes by skipping the pairs already on disk;
//! consolidated output is sorted, making the final files byte-identical
//! under any worker count.
//!
//! Randomness is budgeted through [`crate::stream`]: cohort draws,
//! fold draws, method-internal draws, and the oracle's covariate sample
//! all live on separate streams keyed by (purpose, scenario,
//! replication, method), so adding a method or changing the worker
//! count never perturbs anything else.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{
    generate_cohort, oracle_covariates, optimal_rule, CovariateModel, DgpError, OracleTable,
    ScenarioSpec,
};
use crate::metrics::{misclassification, ReplicationMetrics, ValueSet, CSV_COLUMNS};
use crate::model::{Cohort, FoldAssignment, ObservedRecord, TreatmentRule};
use crate::numeric::{mean, quantile_sorted, sample_sd};
use crate::rules::{
    crossfit_rule_with, estimate_rule, max_ensemble, FitMode, Method, NuisanceSet,
    RuleEstimatorSpec,
};
use crate::stream;
use crate::value::{IpwWeights, ValueEstimator, WeightBase};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("csv encoding: {0}")]
    CsvFormat(String),
    #[error("no result rows found under {}", .0.display())]
    EmptyResults(PathBuf),
    #[error(
        "{} holds results for a different experiment ({detail}); \
         use a fresh output directory",
        dir.display()
    )]
    ConfigMismatch { dir: PathBuf, detail: String },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Dgp(#[from] DgpError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Methods the harness knows how to run
// ---------------------------------------------------------------------------

/// One column of an experiment: a value estimator scored at the oracle
/// rule, a static rule, or a rule estimator from [`crate::rules`].
///
/// Value-estimator methods (`v1`, `v2`, `v3`) measure value-estimation
/// error with the rule held fixed at the oracle's: their rows have
/// `metric_ii = 0`, zero misclassification, and `metric_iii` equal to
/// `metric_i` computed with their own estimator. Static rules and rule
/// estimators are scored with the configured value estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarnessMethod {
    Value(ValueEstimator),
    Static(u8),
    Estimator(Method),
}

impl HarnessMethod {
    pub fn parse(id: &str) -> Option<HarnessMethod> {
        if let Some(estimator) = ValueEstimator::parse(id) {
            return Some(HarnessMethod::Value(estimator));
        }
        match id {
            "static_0" => Some(HarnessMethod::Static(0)),
            "static_1" => Some(HarnessMethod::Static(1)),
            _ => Method::parse(id).map(HarnessMethod::Estimator),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            HarnessMethod::Value(estimator) => estimator.id(),
            HarnessMethod::Static(0) => "static_0",
            HarnessMethod::Static(_) => "static_1",
            HarnessMethod::Estimator(method) => method.id(),
        }
    }

    /// Every recognized method id, for diagnostics and CLI help.
    pub fn known_ids() -> Vec<&'static str> {
        let mut ids: Vec<&'static str> =
            ValueEstimator::ALL.iter().map(|e| e.id()).collect();
        ids.push("static_0");
        ids.push("static_1");
        ids.extend(Method::ALL.iter().map(|m| m.id()));
        ids
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full description of an experiment. Loadable from TOML; every field
/// has a default, so a config file only needs the fields it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in scenario ids to run.
    pub scenarios: Vec<u8>,
    /// Cohort size per replication.
    pub n: usize,
    /// Replications per scenario.
    pub replications: u64,
    /// Folds for cross-fitted modes.
    pub folds: usize,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    /// Method ids to run; see [`HarnessMethod::known_ids`].
    pub methods: Vec<String>,
    /// Estimation modes to run every method in.
    pub modes: Vec<FitMode>,
    /// Value estimator used to score fitted rules.
    pub value_estimator: ValueEstimator,
    /// Fresh covariate draws behind the per-scenario oracle values.
    pub oracle_draws: usize,
    /// Candidate methods of `max_ensemble`. The ensemble reports one row
    /// per candidate alongside its own, so candidates are not listed in
    /// `methods` as well.
    pub ensemble: Vec<String>,
    /// Output directory; created if missing.
    pub output: PathBuf,
    /// Worker threads for replication-level parallelism. Any value
    /// produces identical output files.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenarios: vec![0, 1, 2, 3],
            n: 1000,
            replications: 100,
            folds: 5,
            seed: 1,
            methods: vec![
                "v1".into(),
                "v2".into(),
                "v3".into(),
                "static_0".into(),
                "static_1".into(),
                "max_ensemble".into(),
            ],
            modes: vec![FitMode::Whole, FitMode::CrossFit],
            value_estimator: ValueEstimator::IpwKm,
            oracle_draws: 200_000,
            ensemble: vec![
                "cox_lasso".into(),
                "cox_enet".into(),
                "ga_plain".into(),
                "owl_linear".into(),
            ],
            output: PathBuf::from("results"),
            workers: std::thread::available_parallelism().map_or(1, usize::from),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    /// Parsed method list, in config order.
    pub fn parsed_methods(&self) -> Result<Vec<HarnessMethod>, HarnessError> {
        self.methods
            .iter()
            .map(|id| {
                HarnessMethod::parse(id).ok_or_else(|| {
                    HarnessError::Config(format!(
                        "unknown method '{id}' (known: {})",
                        HarnessMethod::known_ids().join(", ")
                    ))
                })
            })
            .collect()
    }

    /// Parsed ensemble candidate list, in config order.
    pub fn parsed_ensemble(&self) -> Result<Vec<Method>, HarnessError> {
        self.ensemble
            .iter()
            .map(|id| match Method::parse(id) {
                Some(Method::MaxEnsemble) | None => Err(HarnessError::Config(format!(
                    "invalid ensemble candidate '{id}'"
                ))),
                Some(method) => Ok(method),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.scenarios.is_empty() {
            return fail("at least one scenario is required".into());
        }
        for &id in &self.scenarios {
            if ScenarioSpec::builtin(id).is_none() {
                return fail(format!("unknown scenario id {id} (built-ins are 0-3)"));
            }
        }
        if has_duplicates(&self.scenarios) {
            return fail("duplicate scenario id".into());
        }
        if self.n < 100 {
            return fail(format!("cohort size must be at least 100, got {}", self.n));
        }
        if self.replications < 1 {
            return fail("at least one replication is required".into());
        }
        if self.folds < 2 {
            return fail(format!("cross-fitting needs at least 2 folds, got {}", self.folds));
        }
        if self.folds > self.n {
            return fail(format!(
                "{} folds cannot split {} records",
                self.folds, self.n
            ));
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if has_duplicates(&self.methods) {
            return fail("duplicate method id".into());
        }
        let methods = self.parsed_methods()?;
        if self.modes.is_empty() {
            return fail("at least one mode is required".into());
        }
        if has_duplicates(&self.modes) {
            return fail("duplicate mode".into());
        }
        if self.oracle_draws == 0 {
            return fail("oracle needs at least one draw".into());
        }
        if self.workers == 0 {
            return fail("at least one worker is required".into());
        }
        if methods.contains(&HarnessMethod::Estimator(Method::MaxEnsemble)) {
            if self.ensemble.is_empty() {
                return fail("max_ensemble needs at least one candidate".into());
            }
            if has_duplicates(&self.ensemble) {
                return fail("duplicate ensemble candidate".into());
            }
            self.parsed_ensemble()?;
            for id in &self.ensemble {
                if self.methods.contains(id) {
                    return fail(format!(
                        "'{id}' is both a method and an ensemble candidate; \
                         the ensemble already reports one row per candidate"
                    ));
                }
            }
        }
        Ok(())
    }

    /// The config with execution-only fields normalized away, for
    /// deciding whether an output directory belongs to this experiment.
    /// Worker count and directory location never change the results, so
    /// a resume may change them.
    fn science_key(&self) -> ExperimentConfig {
        let mut key = self.clone();
        key.workers = 1;
        key.output = PathBuf::new();
        key
    }
}

fn has_duplicates<T: Ord>(items: &[T]) -> bool {
    let mut seen = BTreeSet::new();
    items.iter().any(|item| !seen.insert(item))
}

// ---------------------------------------------------------------------------
// One replication
// ---------------------------------------------------------------------------

/// Everything about one scenario that is shared across its replications:
/// the spec, the covariate model, the oracle rule, and the cached oracle
/// draws with their true survivals. Built once per run from the
/// scenario's own oracle stream, so every method and replication is
/// scored against the same draws and comparisons are paired.
pub struct ScenarioContext {
    pub spec: ScenarioSpec,
    pub model: CovariateModel,
    pub oracle_rule: TreatmentRule,
    pub oracle: OracleTable,
}

impl ScenarioContext {
    pub fn new(config: &ExperimentConfig, spec: &ScenarioSpec) -> Result<Self, HarnessError> {
        let model = CovariateModel::default();
        let mut rng = stream::derive_rng(config.seed, &[stream::ORACLE, u64::from(spec.id)]);
        let draws = oracle_covariates(&model, config.oracle_draws, &mut rng)?;
        let oracle = OracleTable::new(spec, draws)?;
        Ok(ScenarioContext {
            spec: spec.clone(),
            model,
            oracle_rule: optimal_rule(spec),
            oracle,
        })
    }
}

/// A method that produced no rows in one replication, and why. The run
/// records the failure and continues; the corresponding rows are simply
/// missing from the per-replication CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub scenario: u8,
    pub rep: u64,
    pub method: String,
    pub mode: FitMode,
    pub error: String,
}

/// Column order of the failures CSV.
pub const FAILURE_COLUMNS: [&str; 5] = ["scenario", "rep", "method", "mode", "error"];

/// All output of one (scenario, replication) pair.
#[derive(Clone, Debug)]
pub struct ReplicationOutput {
    pub scenario: u8,
    pub rep: u64,
    pub rows: Vec<ReplicationMetrics>,
    pub failures: Vec<MethodFailure>,
}

/// Cohort-level work shared by every method of a replication.
struct Prepared {
    cohort: Cohort,
    nuisances: NuisanceSet,
    base: Arc<WeightBase>,
    /// Estimated value of the oracle rule under the configured
    /// estimator; the `v_hat_dopt` column of every rule-method row.
    v_hat_dopt: f64,
    weights_dopt: IpwWeights,
    /// One fold split per replication, shared by every cross-fitted
    /// method so their comparison is paired.
    folds: Option<FoldAssignment>,
}

/// Runs one replication: simulates the cohort, fits nuisances once, runs
/// every (method, mode) pair, and scores each fitted rule against the
/// scenario's oracle. Deterministic given (master seed, scenario id,
/// rep): every random draw comes from a stream keyed by those three plus
/// the method id, so the output is independent of execution order.
///
/// A failing method becomes a [`MethodFailure`] and the run continues;
/// only cohort generation itself errors out.
pub fn run_replication(
    config: &ExperimentConfig,
    context: &ScenarioContext,
    rep: u64,
) -> Result<ReplicationOutput, HarnessError> {
    let scenario = context.spec.id;
    let methods = config.parsed_methods()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();

    let mut data_rng =
        stream::derive_rng(config.seed, &[stream::DATA, u64::from(scenario), rep]);
    let cohort = generate_cohort(&context.spec, &context.model, config.n, &mut data_rng)?.cohort;

    let prepared = prepare(config, context, cohort, &methods, rep);
    let prepared = match prepared {
        Ok(prepared) => prepared,
        Err(message) => {
            // Nothing can be scored without weights; every pair fails.
            for &mode in &config.modes {
                for method in &methods {
                    failures.push(MethodFailure {
                        scenario,
                        rep,
                        method: method.id().to_string(),
                        mode,
                        error: message.clone(),
                    });
                }
            }
            return Ok(ReplicationOutput { scenario, rep, rows, failures });
        }
    };

    for &mode in &config.modes {
        for &method in &methods {
            match run_method(config, context, &prepared, method, mode, rep) {
                Ok(mut method_rows) => rows.append(&mut method_rows),
                Err(error) => failures.push(MethodFailure {
                    scenario,
                    rep,
                    method: method.id().to_string(),
                    mode,
                    error,
                }),
            }
            if method == HarnessMethod::Estimator(Method::MaxEnsemble) {
                // Candidate rows ride along with the ensemble's; a failed
                // candidate was recorded by the ensemble as a note.
                for candidate in ensemble_failures(&rows, &failures, config, scenario, rep, mode)
                {
                    failures.push(candidate);
                }
            }
        }
    }

    Ok(ReplicationOutput { scenario, rep, rows, failures })
}

fn prepare(
    config: &ExperimentConfig,
    context: &ScenarioContext,
    cohort: Cohort,
    methods: &[HarnessMethod],
    rep: u64,
) -> Result<Prepared, String> {
    let horizon = context.spec.horizon;
    let whole_outcome = config.modes.contains(&FitMode::Whole)
        && methods.iter().any(|m| match m {
            HarnessMethod::Estimator(method) => method.needs_outcome(),
            _ => false,
        });
    let nuisances = NuisanceSet::fit(&cohort, whole_outcome).map_err(|e| e.to_string())?;
    let base = Arc::new(
        WeightBase::new(&cohort, &nuisances.propensity, &nuisances.censor, horizon)
            .map_err(|e| e.to_string())?,
    );
    let weights_dopt = IpwWeights::for_rule(&base, &cohort, &context.oracle_rule)
        .map_err(|e| e.to_string())?;
    let v_hat_dopt =
        config.value_estimator.estimate(&weights_dopt).map_err(|e| e.to_string())?;
    let folds = if config.modes.contains(&FitMode::CrossFit) {
        let mut fold_rng = stream::derive_rng(
            config.seed,
            &[stream::FOLDS, u64::from(context.spec.id), rep],
        );
        Some(
            FoldAssignment::random(cohort.n(), config.folds, &mut fold_rng)
                .map_err(|e| e.to_string())?,
        )
    } else {
        None
    };
    Ok(Prepared { cohort, nuisances, base, v_hat_dopt, weights_dopt, folds })
}

/// Scores one fitted rule: its estimated value, true value, and
/// misclassification against the oracle rule.
fn score_rule(
    config: &ExperimentConfig,
    context: &ScenarioContext,
    prepared: &Prepared,
    rule: &TreatmentRule,
) -> Result<(ValueSet, f64), String> {
    let weights =
        IpwWeights::for_rule(&prepared.base, &prepared.cohort, rule).map_err(|e| e.to_string())?;
    let v_hat_dhat = config.value_estimator.estimate(&weights).map_err(|e| e.to_string())?;
    let v_true_dhat = context.oracle.value_of(rule).map_err(|e| e.to_string())?;
    let wrong = misclassification(rule, &context.oracle_rule, &prepared.cohort)
        .map_err(|e| e.to_string())?;
    Ok((
        ValueSet {
            v_hat_dopt: prepared.v_hat_dopt,
            v_hat_dhat,
            v_true_dhat,
            v_true_dopt: context.oracle.optimal_value(),
        },
        wrong,
    ))
}

fn method_rng(
    config: &ExperimentConfig,
    scenario: u8,
    rep: u64,
    mode: FitMode,
    id: &str,
) -> rand_chacha::ChaCha12Rng {
    let mode_tag = match mode {
        FitMode::Whole => 0,
        FitMode::CrossFit => 1,
    };
    stream::derive_rng(
        config.seed,
        &[stream::METHOD, u64::from(scenario), rep, mode_tag, stream::id_tag(id)],
    )
}

fn run_method(
    config: &ExperimentConfig,
    context: &ScenarioContext,
    prepared: &Prepared,
    method: HarnessMethod,
    mode: FitMode,
    rep: u64,
) -> Result<Vec<ReplicationMetrics>, String> {
    let scenario = context.spec.id;
    let v_true_dopt = context.oracle.optimal_value();
    match method {
        HarnessMethod::Value(estimator) => {
            // The rule is pinned to the oracle's, so the row isolates
            // value-estimation error: metric_ii and misclassification
            // are identically zero and metric_iii equals metric_i.
            let v_hat = estimator.estimate(&prepared.weights_dopt).map_err(|e| e.to_string())?;
            let values = ValueSet {
                v_hat_dopt: v_hat,
                v_hat_dhat: v_hat,
                v_true_dhat: v_true_dopt,
                v_true_dopt,
            };
            Ok(vec![ReplicationMetrics::assemble(
                scenario,
                rep,
                method.id(),
                mode,
                values,
                0.0,
            )])
        }
        HarnessMethod::Static(arm) => {
            let rule = TreatmentRule::Static(arm);
            let (values, wrong) = score_rule(config, context, prepared, &rule)?;
            Ok(vec![ReplicationMetrics::assemble(scenario, rep, method.id(), mode, values, wrong)])
        }
        HarnessMethod::Estimator(Method::MaxEnsemble) => {
            run_ensemble(config, context, prepared, mode, rep)
        }
        HarnessMethod::Estimator(inner) => {
            let spec = RuleEstimatorSpec::new(inner);
            let mut rng = method_rng(config, scenario, rep, mode, inner.id());
            let fitted = match mode {
                FitMode::Whole => estimate_rule(
                    &prepared.cohort,
                    &spec,
                    &prepared.nuisances,
                    context.spec.horizon,
                    &mut rng,
                ),
                FitMode::CrossFit => {
                    let folds = prepared.folds.as_ref().expect("folds exist in crossfit mode");
                    crossfit_rule_with(&prepared.cohort, &spec, folds, context.spec.horizon, &mut rng)
                }
            }
            .map_err(|e| e.to_string())?;
            let (values, wrong) = score_rule(config, context, prepared, &fitted.rule)?;
            Ok(vec![ReplicationMetrics::assemble(scenario, rep, method.id(), mode, values, wrong)])
        }
    }
}

fn run_ensemble(
    config: &ExperimentConfig,
    context: &ScenarioContext,
    prepared: &Prepared,
    mode: FitMode,
    rep: u64,
) -> Result<Vec<ReplicationMetrics>, String> {
    let scenario = context.spec.id;
    let specs: Vec<RuleEstimatorSpec> = config
        .parsed_ensemble()
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(RuleEstimatorSpec::new)
        .collect();
    let mut rng = method_rng(config, scenario, rep, mode, Method::MaxEnsemble.id());
    let result = max_ensemble(
        &prepared.cohort,
        &specs,
        mode,
        config.folds,
        context.spec.horizon,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;

    let mut rows = Vec::with_capacity(result.candidates.len() + 1);
    for candidate in &result.candidates {
        let Some(rule) = &candidate.rule else {
            // Recorded as a note inside the ensemble; surfaced as a
            // failure row by the caller via ensemble_failures.
            continue;
        };
        let (values, wrong) = score_rule(config, context, prepared, rule)?;
        rows.push(ReplicationMetrics::assemble(
            scenario,
            rep,
            candidate.method.id(),
            mode,
            values,
            wrong,
        ));
    }
    let (values, wrong) = score_rule(config, context, prepared, result.chosen_rule())?;
    rows.push(ReplicationMetrics::assemble(
        scenario,
        rep,
        Method::MaxEnsemble.id(),
        mode,
        values,
        wrong,
    ));
    Ok(rows)
}

/// Failures for ensemble candidates that produced no row this mode: the
/// candidates configured but absent from `rows` and not already failed.
fn ensemble_failures(
    rows: &[ReplicationMetrics],
    failures: &[MethodFailure],
    config: &ExperimentConfig,
    scenario: u8,
    rep: u64,
    mode: FitMode,
) -> Vec<MethodFailure> {
    let mut missing = Vec::new();
    let covered = |method: &str| {
        rows.iter().any(|r| r.rep == rep && r.mode == mode && r.method == method)
            || failures
                .iter()
                .any(|f| f.rep == rep && f.mode == mode && f.method == method)
    };
    for id in &config.ensemble {
        if !covered(id) {
            missing.push(MethodFailure {
                scenario,
                rep,
                method: id.clone(),
                mode,
                error: "ensemble candidate failed; see the max_ensemble audit note".into(),
            });
        }
    }
    missing
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

fn fragments_dir(output: &Path) -> PathBuf {
    output.join("fragments")
}

fn fragment_path(output: &Path, scenario: u8, rep: u64) -> PathBuf {
    fragments_dir(output).join(format!("s{scenario}_r{rep:06}.csv"))
}

fn failure_fragment_path(output: &Path, scenario: u8, rep: u64) -> PathBuf {
    fragments_dir(output).join(format!("s{scenario}_r{rep:06}_failures.csv"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer.write_record(header).map_err(|e| HarnessError::CsvFormat(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| HarnessError::CsvFormat(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| HarnessError::CsvFormat(e.to_string()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

/// Writes one replication's fragment files. The failures file lands
/// first: the main fragment is the completion marker, so a crash between
/// the two writes leaves the pair incomplete rather than half-recorded.
fn write_fragment(output: &Path, result: &ReplicationOutput) -> Result<(), HarnessError> {
    let failure_path = failure_fragment_path(output, result.scenario, result.rep);
    if result.failures.is_empty() {
        if failure_path.exists() {
            fs::remove_file(&failure_path).map_err(io_err(&failure_path))?;
        }
    } else {
        write_atomic(&failure_path, &csv_bytes(&FAILURE_COLUMNS, &result.failures)?)?;
    }
    let path = fragment_path(output, result.scenario, result.rep);
    write_atomic(&path, &csv_bytes(&CSV_COLUMNS, &result.rows)?)
}

fn sort_rows(rows: &mut [ReplicationMetrics]) {
    rows.sort_by(|a, b| {
        (a.scenario, a.rep, &a.method, a.mode.to_string()).cmp(&(
            b.scenario,
            b.rep,
            &b.method,
            b.mode.to_string(),
        ))
    });
}

/// Reads every fragment under `dir` back into sorted rows and failures.
fn collect_fragments(
    output: &Path,
) -> Result<(Vec<ReplicationMetrics>, Vec<MethodFailure>), HarnessError> {
    let dir = fragments_dir(output);
    let mut rows: Vec<ReplicationMetrics> = Vec::new();
    let mut failures: Vec<MethodFailure> = Vec::new();
    if !dir.exists() {
        return Ok((rows, failures));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(&dir))?;
    paths.sort();
    for path in paths {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.ends_with(".csv") {
            continue;
        }
        if name.ends_with("_failures.csv") {
            failures.extend(read_csv::<MethodFailure>(&path)?);
        } else {
            rows.extend(read_csv::<ReplicationMetrics>(&path)?);
        }
    }
    sort_rows(&mut rows);
    failures.sort_by(|a, b| {
        (a.scenario, a.rep, &a.method, a.mode.to_string()).cmp(&(
            b.scenario,
            b.rep,
            &b.method,
            b.mode.to_string(),
        ))
    });
    Ok((rows, failures))
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

/// What [`run_experiment`] did, and where the output files are.
#[derive(Clone, Debug)]
pub struct RunReport {
    /// (scenario, rep) pairs executed in this invocation.
    pub completed_pairs: usize,
    /// Pairs already on disk and skipped.
    pub skipped_pairs: usize,
    pub rows: usize,
    pub failures: usize,
    pub wall_seconds: f64,
    pub replications_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub manifest_json: PathBuf,
}

/// Run manifest written next to the result files: what ran, with which
/// library version, and how long it took.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub package: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub completed_pairs: usize,
    pub skipped_pairs: usize,
    pub rows: usize,
    pub failures: usize,
    pub wall_seconds: f64,
}

/// Runs the whole experiment grid and writes, under `config.output`:
/// per-pair fragment files, the consolidated sorted `replications.csv`
/// and `failures.csv`, the `summary.csv` of [`summarize`], and a
/// `manifest.json`. Pairs whose fragment already exists are skipped, so
/// re-running after a crash completes the run; the finished files are
/// byte-identical to an uninterrupted run's under any worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    config.validate()?;
    let output = &config.output;
    fs::create_dir_all(fragments_dir(output)).map_err(io_err(output))?;
    check_config_echo(config)?;

    let mut todo: Vec<(u8, u64)> = Vec::new();
    let mut skipped = 0usize;
    for &scenario in &config.scenarios {
        for rep in 0..config.replications {
            if fragment_path(output, scenario, rep).exists() {
                skipped += 1;
            } else {
                todo.push((scenario, rep));
            }
        }
    }

    let mut contexts: BTreeMap<u8, ScenarioContext> = BTreeMap::new();
    for &(scenario, _) in &todo {
        if !contexts.contains_key(&scenario) {
            let spec = ScenarioSpec::builtin(scenario).expect("validated scenario id");
            contexts.insert(scenario, ScenarioContext::new(config, &spec)?);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    pool.install(|| {
        todo.par_iter()
            .map(|&(scenario, rep)| {
                let context = &contexts[&scenario];
                let result = run_replication(config, context, rep)?;
                write_fragment(output, &result)
            })
            .collect::<Result<Vec<()>, HarnessError>>()
    })?;

    let (rows, failures) = collect_fragments(output)?;
    let replications_csv = output.join("replications.csv");
    write_atomic(&replications_csv, &csv_bytes(&CSV_COLUMNS, &rows)?)?;
    let failures_csv = output.join("failures.csv");
    write_atomic(&failures_csv, &csv_bytes(&FAILURE_COLUMNS, &failures)?)?;

    let summary = summarize_rows(&rows);
    let summary_csv = output.join("summary.csv");
    write_atomic(&summary_csv, &csv_bytes(&SUMMARY_COLUMNS, &summary)?)?;

    let manifest = RunManifest {
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        completed_pairs: todo.len(),
        skipped_pairs: skipped,
        rows: rows.len(),
        failures: failures.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let manifest_json = output.join("manifest.json");
    let manifest_text =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&manifest_json, manifest_text.as_bytes())?;

    Ok(RunReport {
        completed_pairs: todo.len(),
        skipped_pairs: skipped,
        rows: rows.len(),
        failures: failures.len(),
        wall_seconds: manifest.wall_seconds,
        replications_csv,
        summary_csv,
        manifest_json,
    })
}

/// The experiment that owns an output directory is pinned by a config
/// echo written on first use. Resuming with a different experiment (not
/// counting worker count or directory location) is an error; without
/// the check, mixed fragments would consolidate into a file that no
/// single config produced.
fn check_config_echo(config: &ExperimentConfig) -> Result<(), HarnessError> {
    let echo_path = config.output.join("config.toml");
    if echo_path.exists() {
        let text = fs::read_to_string(&echo_path).map_err(io_err(&echo_path))?;
        let existing = ExperimentConfig::from_toml_str(&text)?;
        if existing.science_key() != config.science_key() {
            return Err(HarnessError::ConfigMismatch {
                dir: config.output.clone(),
                detail: format!("existing echo at {}", echo_path.display()),
            });
        }
        Ok(())
    } else {
        write_atomic(&echo_path, config.to_toml_string().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

/// Distribution of one metric over the replications of one
/// (scenario, method, mode) cell: mean, SD, and the five-number summary
/// a boxplot needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: u8,
    pub method: String,
    pub mode: FitMode,
    pub metric: String,
    /// Replications with a row in this cell.
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Column order of the summary CSV.
pub const SUMMARY_COLUMNS: [&str; 12] = [
    "scenario", "method", "mode", "metric", "n", "mean", "sd", "min", "q1", "median", "q3",
    "max",
];

const SUMMARIZED_METRICS: [&str; 4] =
    ["metric_i", "metric_ii", "metric_iii", "misclassification"];

/// Summarizes result rows already in memory; [`summarize`] is the
/// file-reading form.
pub fn summarize_rows(rows: &[ReplicationMetrics]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u8, String, String), Vec<&ReplicationMetrics>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.scenario, row.method.clone(), row.mode.to_string()))
            .or_default()
            .push(row);
    }
    let mut summary = Vec::with_capacity(groups.len() * SUMMARIZED_METRICS.len());
    for ((scenario, method, _), group) in &groups {
        let mode = group[0].mode;
        for metric in SUMMARIZED_METRICS {
            let mut values: Vec<f64> = group
                .iter()
                .map(|row| match metric {
                    "metric_i" => row.metric_i,
                    "metric_ii" => row.metric_ii,
                    "metric_iii" => row.metric_iii,
                    _ => row.misclassification,
                })
                .collect();
            values.sort_by(f64::total_cmp);
            summary.push(SummaryRow {
                scenario: *scenario,
                method: method.clone(),
                mode,
                metric: metric.to_string(),
                n: values.len(),
                mean: mean(&values),
                sd: if values.len() > 1 { sample_sd(&values) } else { 0.0 },
                min: values[0],
                q1: quantile_sorted(&values, 0.25),
                median: quantile_sorted(&values, 0.5),
                q3: quantile_sorted(&values, 0.75),
                max: values[values.len() - 1],
            });
        }
    }
    summary
}

/// Reads an output directory and summarizes it: `replications.csv` if
/// the run consolidated, otherwise whatever fragments exist (so a
/// crashed run can still be inspected). Errors if neither holds any
/// rows.
pub fn summarize(output: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let consolidated = output.join("replications.csv");
    let rows: Vec<ReplicationMetrics> = if consolidated.exists() {
        read_csv(&consolidated)?
    } else {
        collect_fragments(output)?.0
    };
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults(output.to_path_buf()));
    }
    Ok(summarize_rows(&rows))
}

/// Writes summary rows to `summary.csv` under `output` and returns the
/// path.
pub fn write_summary(output: &Path, summary: &[SummaryRow]) -> Result<PathBuf, HarnessError> {
    let path = output.join("summary.csv");
    write_atomic(&path, &csv_bytes(&SUMMARY_COLUMNS, summary)?)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Cohort CSV
// ---------------------------------------------------------------------------

/// Writes a cohort as CSV with columns `z,delta,a,x1..xp`.
pub fn write_cohort_csv<W: io::Write>(cohort: &Cohort, writer: W) -> Result<(), HarnessError> {
    let mut csv_writer = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header = vec!["z".to_string(), "delta".to_string(), "a".to_string()];
    header.extend((1..=cohort.p()).map(|j| format!("x{j}")));
    csv_writer.write_record(&header).map_err(|e| HarnessError::CsvFormat(e.to_string()))?;
    for record in cohort.records() {
        csv_writer
            .serialize((record.z, record.delta, record.a, &record.x))
            .map_err(|e| HarnessError::CsvFormat(e.to_string()))?;
    }
    csv_writer.flush().map_err(|e| HarnessError::CsvFormat(e.to_string()))
}

/// Reads a cohort written by [`write_cohort_csv`].
pub fn read_cohort_csv<R: io::Read>(reader: R) -> Result<Cohort, HarnessError> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut records = Vec::new();
    for (line, row) in csv_reader.records().enumerate() {
        let row = row.map_err(|e| HarnessError::CsvFormat(e.to_string()))?;
        let bad = |what: &str| {
            HarnessError::CsvFormat(format!("row {}: bad {what}", line + 1))
        };
        if row.len() < 4 {
            return Err(bad("record: need z,delta,a and at least one covariate"));
        }
        let z: u32 = row[0].parse().map_err(|_| bad("z"))?;
        let delta: u8 = row[1].parse().map_err(|_| bad("delta"))?;
        let a: u8 = row[2].parse().map_err(|_| bad("a"))?;
        let x: Vec<f64> = row
            .iter()
            .skip(3)
            .map(|field| field.parse().map_err(|_| bad("covariate")))
            .collect::<Result<_, _>>()?;
        records.push(
            ObservedRecord::new(z, delta, a, x)
                .map_err(|e| HarnessError::CsvFormat(format!("row {}: {e}", line + 1)))?,
        );
    }
    Cohort::new(records).map_err(|e| HarnessError::CsvFormat(e.to_string()))
}
