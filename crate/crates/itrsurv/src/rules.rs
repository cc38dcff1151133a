//! Treatment-rule estimators: an outcome-regression plug-in, direct
//! value search with a genetic algorithm, outcome-weighted learning, and
//! a max-value ensemble over any of them, with optional cross-fitting.
//!
//! All estimators return a [`FittedRule`] wrapping a
//! [`TreatmentRule`], so downstream value estimation and serialization
//! do not care how a rule was produced. Estimators never fail on
//! degenerate cohorts they can recognize (no events in an arm, no
//! survivors past the horizon); they fall back to a static rule and
//! record why in the diagnostics.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::{
    Cohort, FoldAssignment, ModelError, StepSurvivalCurve, SurvivalScore, TreatmentRule,
    MAX_MONTH,
};
use crate::nuisance::{
    fit_censoring_model, fit_cox_cv, fit_logistic, fit_outcome_model, CoxModel, Design,
    DesignKind, NuisanceError, PropensityModel,
};
use crate::stream;
use crate::value::{
    value_ipw_km, value_ipw_km_augmented, AugmentationTables, IpwWeights, ValueError, WeightBase,
};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("method {0} augments with an outcome model, but none was fitted")]
    MissingOutcome(Method),
    #[error("invalid estimator configuration: {0}")]
    InvalidParam(String),
    #[error("no ensemble candidate produced a rule with a finite value estimate")]
    AllCandidatesFailed,
    #[error("the search objective was undefined for every candidate rule")]
    NoViableCandidate,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Value(#[from] ValueError),
}

/// The rule estimators this crate ships. The identifier returned by
/// [`Method::id`] is the name used in configuration files and output
/// rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CoxRidge,
    CoxLasso,
    CoxEnet,
    GaPlain,
    GaAugmented,
    GaSmoothed,
    GaAugSmoothed,
    OwlLinear,
    MaxEnsemble,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::CoxRidge,
        Method::CoxLasso,
        Method::CoxEnet,
        Method::GaPlain,
        Method::GaAugmented,
        Method::GaSmoothed,
        Method::GaAugSmoothed,
        Method::OwlLinear,
        Method::MaxEnsemble,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::CoxRidge => "cox_ridge",
            Method::CoxLasso => "cox_lasso",
            Method::CoxEnet => "cox_enet",
            Method::GaPlain => "ga_plain",
            Method::GaAugmented => "ga_augmented",
            Method::GaSmoothed => "ga_smoothed",
            Method::GaAugSmoothed => "ga_aug_smoothed",
            Method::OwlLinear => "owl_linear",
            Method::MaxEnsemble => "max_ensemble",
        }
    }

    pub fn parse(text: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.id() == text)
    }

    /// Whether the estimator augments its value estimates with an
    /// outcome model.
    pub fn needs_outcome(self) -> bool {
        matches!(self, Method::GaAugmented | Method::GaAugSmoothed)
    }

    /// The elastic-net mixing behind the outcome-regression methods;
    /// `None` for everything else.
    pub fn penalty_kind(self) -> Option<PenaltyKind> {
        match self {
            Method::CoxRidge => Some(PenaltyKind::Ridge),
            Method::CoxLasso => Some(PenaltyKind::Lasso),
            Method::CoxEnet => Some(PenaltyKind::ElasticNet),
            _ => None,
        }
    }

    fn ga_variant(self) -> Option<GaVariant> {
        match self {
            Method::GaPlain => Some(GaVariant::Plain),
            Method::GaAugmented => Some(GaVariant::Augmented),
            Method::GaSmoothed => Some(GaVariant::Smoothed),
            Method::GaAugSmoothed => Some(GaVariant::AugmentedSmoothed),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::parse(s)
            .ok_or_else(|| RuleError::InvalidParam(format!("unknown method '{s}'")))
    }
}

/// Elastic-net mixing used by the outcome-regression plug-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Ridge,
    Lasso,
    ElasticNet,
}

impl PenaltyKind {
    pub fn mixing(self) -> f64 {
        match self {
            PenaltyKind::Ridge => 0.0,
            PenaltyKind::Lasso => 1.0,
            PenaltyKind::ElasticNet => 0.5,
        }
    }

    fn method(self) -> Method {
        match self {
            PenaltyKind::Ridge => Method::CoxRidge,
            PenaltyKind::Lasso => Method::CoxLasso,
            PenaltyKind::ElasticNet => Method::CoxEnet,
        }
    }
}

/// Which objective the genetic search maximizes and what kind of rule
/// it evaluates during the search. Every variant returns a hard
/// linear-threshold rule; smoothing only shapes the search objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaVariant {
    Plain,
    Augmented,
    Smoothed,
    AugmentedSmoothed,
}

impl GaVariant {
    fn augmented(self) -> bool {
        matches!(self, GaVariant::Augmented | GaVariant::AugmentedSmoothed)
    }

    fn smoothed(self) -> bool {
        matches!(self, GaVariant::Smoothed | GaVariant::AugmentedSmoothed)
    }

    fn method(self) -> Method {
        match self {
            GaVariant::Plain => Method::GaPlain,
            GaVariant::Augmented => Method::GaAugmented,
            GaVariant::Smoothed => Method::GaSmoothed,
            GaVariant::AugmentedSmoothed => Method::GaAugSmoothed,
        }
    }
}

/// Genetic-search settings. Coefficient vectors live on the unit sphere
/// in standardized covariate coordinates, so the defaults do not depend
/// on covariate scale; `bandwidth` is likewise the probit smoothing
/// width on the standardized linear score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub mutation_sd: f64,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    /// Stop after this many generations without improvement.
    pub stagnation: usize,
    /// Smoothing bandwidth for the smoothed variants.
    pub bandwidth: f64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 50,
            generations: 100,
            tournament: 3,
            mutation_sd: 0.1,
            mutation_prob: 0.2,
            crossover_prob: 0.7,
            stagnation: 20,
            bandwidth: 0.1,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.population < 2 {
            return Err(RuleError::InvalidParam(format!(
                "population must be at least 2, got {}",
                self.population
            )));
        }
        if self.generations == 0 {
            return Err(RuleError::InvalidParam("generations must be positive".into()));
        }
        if self.tournament == 0 || self.tournament > self.population {
            return Err(RuleError::InvalidParam(format!(
                "tournament size {} must lie in 1..={}",
                self.tournament, self.population
            )));
        }
        if !(self.mutation_sd.is_finite() && self.mutation_sd > 0.0) {
            return Err(RuleError::InvalidParam(format!(
                "mutation_sd must be positive, got {}",
                self.mutation_sd
            )));
        }
        for (what, value) in [
            ("mutation_prob", self.mutation_prob),
            ("crossover_prob", self.crossover_prob),
        ] {
            if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                return Err(RuleError::InvalidParam(format!(
                    "{what} must lie in [0, 1], got {value}"
                )));
            }
        }
        if self.stagnation == 0 {
            return Err(RuleError::InvalidParam("stagnation must be positive".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(RuleError::InvalidParam(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Outcome-weighted learning settings: the ridge weight on the slope
/// coefficients and the subgradient-descent step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OwlParams {
    pub regularization: f64,
    pub steps: usize,
}

impl Default for OwlParams {
    fn default() -> Self {
        OwlParams { regularization: 1.0, steps: 50_000 }
    }
}

impl OwlParams {
    pub fn validate(&self) -> Result<(), RuleError> {
        if !(self.regularization.is_finite() && self.regularization >= 0.0) {
            return Err(RuleError::InvalidParam(format!(
                "regularization must be non-negative, got {}",
                self.regularization
            )));
        }
        if self.steps == 0 {
            return Err(RuleError::InvalidParam("steps must be positive".into()));
        }
        Ok(())
    }
}

/// A single-method estimator configuration: which method to run plus
/// the search parameters the method family reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleEstimatorSpec {
    pub method: Method,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub owl: OwlParams,
}

impl RuleEstimatorSpec {
    pub fn new(method: Method) -> Self {
        RuleEstimatorSpec { method, ga: GaParams::default(), owl: OwlParams::default() }
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if self.method == Method::MaxEnsemble {
            return Err(RuleError::InvalidParam(
                "max_ensemble takes a candidate list; call max_ensemble instead".into(),
            ));
        }
        self.ga.validate()?;
        self.owl.validate()
    }
}

/// Propensity, censoring, and (optionally) outcome models fitted on one
/// cohort. Rule estimation and value estimation share this bundle so
/// the models are fitted once per cohort.
#[derive(Clone, Debug)]
pub struct NuisanceSet {
    pub propensity: PropensityModel,
    pub censor: CoxModel,
    pub outcome: Option<CoxModel>,
}

impl NuisanceSet {
    /// Fits the propensity and censoring models, and the outcome model
    /// too when `with_outcome` is set (augmented estimators need it).
    pub fn fit(cohort: &Cohort, with_outcome: bool) -> Result<Self, NuisanceError> {
        let propensity = fit_logistic(cohort)?;
        let censor = fit_censoring_model(cohort)?;
        let outcome = if with_outcome { Some(fit_outcome_model(cohort)?) } else { None };
        Ok(NuisanceSet { propensity, censor, outcome })
    }
}

/// An estimated rule together with how it was obtained: the method, the
/// training objective the returned rule attained (the weighted
/// product-limit value for genetic search, the weighted hinge loss in
/// standardized coordinates for outcome-weighted learning, `None` for
/// plug-in and cross-fitted rules), and human-readable diagnostics.
#[derive(Clone, Debug)]
pub struct FittedRule {
    pub method: Method,
    pub rule: TreatmentRule,
    pub objective: Option<f64>,
    pub diagnostics: Vec<String>,
}

impl FittedRule {
    /// JSON description for audit output.
    pub fn describe(&self) -> serde_json::Value {
        json!({
            "method": self.method.id(),
            "rule": self.rule.describe(),
            "objective": self.objective,
            "diagnostics": self.diagnostics,
        })
    }
}

/// Scores covariates by model-predicted survival past a fixed horizon
/// under a fixed arm; the two arms of a plug-in rule each get one.
#[derive(Clone)]
pub struct CoxArmScore {
    model: Arc<CoxModel>,
    arm: u8,
    horizon: u32,
}

impl CoxArmScore {
    pub fn new(model: Arc<CoxModel>, arm: u8, horizon: u32) -> Result<Self, RuleError> {
        check_rule_horizon(horizon)?;
        if arm > 1 {
            return Err(RuleError::InvalidParam(format!("arm must be 0 or 1, got {arm}")));
        }
        Ok(CoxArmScore { model, arm, horizon })
    }
}

impl SurvivalScore for CoxArmScore {
    /// Panics if `x` does not match the model's covariate dimension.
    fn survival(&self, x: &[f64]) -> f64 {
        self.model
            .event_survival(x, self.arm, self.horizon)
            .expect("covariates match the model the rule was built from")
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "kind": "cox_survival",
            "arm": self.arm,
            "horizon": self.horizon,
            "model": serde_json::to_value(self.model.as_ref())
                .unwrap_or_else(|_| json!("unavailable")),
        })
    }
}

fn check_rule_horizon(horizon: u32) -> Result<(), RuleError> {
    if horizon == 0 || horizon >= MAX_MONTH {
        return Err(RuleError::InvalidParam(format!(
            "horizon must lie in 1..{MAX_MONTH}, got {horizon}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Covariate standardization shared by the direct-search estimators
// ---------------------------------------------------------------------------

/// Per-column mean and standard deviation (population form); constant
/// columns get unit scale so they pass through unchanged.
fn column_stats(cohort: &Cohort) -> (Vec<f64>, Vec<f64>) {
    let n = cohort.n() as f64;
    let p = cohort.p();
    let mut mean = vec![0.0; p];
    for record in cohort.records() {
        for (m, v) in mean.iter_mut().zip(&record.x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut sd = vec![0.0; p];
    for record in cohort.records() {
        for j in 0..p {
            let d = record.x[j] - mean[j];
            sd[j] += d * d;
        }
    }
    for s in &mut sd {
        *s = (*s / n).sqrt();
        if *s <= 0.0 {
            *s = 1.0;
        }
    }
    (mean, sd)
}

/// Maps intercept-first coefficients on standardized covariates to the
/// raw scale, so that the linear score is preserved exactly:
/// `theta . [1, (x - mean) / sd] = raw . [1, x]`.
fn unstandardize(theta: &[f64], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    let mut raw = vec![0.0; theta.len()];
    raw[0] = theta[0];
    for j in 0..mean.len() {
        raw[j + 1] = theta[j + 1] / sd[j];
        raw[0] -= theta[j + 1] * mean[j] / sd[j];
    }
    raw
}

// ---------------------------------------------------------------------------
// Outcome-regression plug-in
// ---------------------------------------------------------------------------

/// Fits a penalized proportional-hazards model of the event time on
/// covariates, treatment, and treatment-by-covariate interactions, with
/// the penalty weight chosen by 5-fold cross-validated partial
/// likelihood, and returns the plug-in rule that treats when the
/// model's predicted survival past the horizon is higher under arm 1.
/// Only the interaction columns are penalized: the main effects form
/// the confounding adjustment set, and shrinking them would leak
/// baseline risk into the treatment contrast.
///
/// When either arm has no events, or the penalized fit fails, the
/// estimator falls back to the static rule favoring the arm with the
/// higher marginal product-limit survival at the horizon and says so in
/// the diagnostics.
pub fn estimate_rule_outcome_regression<R: Rng>(
    cohort: &Cohort,
    penalty: PenaltyKind,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    check_rule_horizon(horizon)?;
    let method = penalty.method();

    for arm in 0..2u8 {
        let events = cohort.records().iter().filter(|r| r.a == arm && r.delta == 1).count();
        if events == 0 {
            return Ok(fallback_marginal_rule(
                cohort,
                horizon,
                method,
                &format!("no events in arm {arm}"),
            ));
        }
    }

    let design = Design::from_cohort(cohort, DesignKind::WithInteractions);
    let times: Vec<u32> = cohort.records().iter().map(|r| r.z).collect();
    let events: Vec<u8> = cohort.records().iter().map(|r| r.delta).collect();
    let mut factors = vec![1.0; design.p()];
    for f in factors.iter_mut().take(cohort.p() + 1) {
        *f = 0.0;
    }
    let folds = FoldAssignment::random(cohort.n(), 5, rng)?;

    match fit_cox_cv(&times, &events, &design, penalty.mixing(), Some(&factors), &folds) {
        Ok((model, report)) => {
            let diagnostics = vec![format!(
                "kept penalty weight {:.6} (grid point {} of {})",
                report.lambdas[report.chosen],
                report.chosen + 1,
                report.lambdas.len()
            )];
            let model = Arc::new(model);
            let arm0 = CoxArmScore::new(Arc::clone(&model), 0, horizon)?;
            let arm1 = CoxArmScore::new(model, 1, horizon)?;
            let rule = TreatmentRule::PlugIn { arm0: Arc::new(arm0), arm1: Arc::new(arm1) };
            Ok(FittedRule { method, rule, objective: None, diagnostics })
        }
        Err(err) => Ok(fallback_marginal_rule(
            cohort,
            horizon,
            method,
            &format!("penalized fit failed ({err})"),
        )),
    }
}

/// Static rule favoring the arm with the higher marginal product-limit
/// survival at the horizon; an arm nobody received cannot be favored,
/// and an exact tie keeps arm 0.
fn fallback_marginal_rule(
    cohort: &Cohort,
    horizon: u32,
    method: Method,
    reason: &str,
) -> FittedRule {
    let mut survival = [f64::NEG_INFINITY; 2];
    for arm in 0..2usize {
        let (zs, deltas): (Vec<u32>, Vec<u8>) = cohort
            .records()
            .iter()
            .filter(|r| usize::from(r.a) == arm)
            .map(|r| (r.z, r.delta))
            .unzip();
        if zs.is_empty() {
            continue;
        }
        survival[arm] = StepSurvivalCurve::kaplan_meier(&zs, &deltas)
            .map(|curve| curve.at(f64::from(horizon)))
            .unwrap_or(f64::NEG_INFINITY);
    }
    let arm = u8::from(survival[1] > survival[0]);
    FittedRule {
        method,
        rule: TreatmentRule::Static(arm),
        objective: None,
        diagnostics: vec![format!(
            "{reason}; using static arm {arm} by marginal survival at month {horizon}"
        )],
    }
}

// ---------------------------------------------------------------------------
// Genetic value search
// ---------------------------------------------------------------------------

/// Maximizes the weighted product-limit value (augmented with outcome
/// predictions for the augmented variants) over linear rules whose
/// coefficients live on the unit sphere in standardized covariate
/// coordinates. Tournament selection, uniform crossover, Gaussian gene
/// mutation with renormalization, one elite carried per generation, and
/// early stopping after `stagnation` generations without improvement.
///
/// The smoothed variants score candidates through the probit-smoothed
/// rule but, like every variant, return the hard threshold rule at the
/// best coefficients found. `objective` on the result is the exact
/// search objective of the returned coefficients, so recomputing the
/// value estimate from the returned rule reproduces it.
pub fn estimate_rule_genetic<R: Rng>(
    cohort: &Cohort,
    variant: GaVariant,
    base: &Arc<WeightBase>,
    tables: Option<&AugmentationTables>,
    params: &GaParams,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    params.validate()?;
    base.check_same_cohort(cohort)?;
    let tables = if variant.augmented() {
        let tables = tables.ok_or(RuleError::MissingOutcome(variant.method()))?;
        if tables.horizon() != base.horizon() || tables.n() != cohort.n() {
            return Err(RuleError::InvalidParam(format!(
                "augmentation tables cover {} records to month {}, need {} to {}",
                tables.n(),
                tables.horizon(),
                cohort.n(),
                base.horizon()
            )));
        }
        Some(tables)
    } else {
        None
    };

    let (mean, sd) = column_stats(cohort);
    let smoothed = variant.smoothed();
    let bandwidth = params.bandwidth;
    let objective = |theta_std: &[f64]| -> f64 {
        let theta = unstandardize(theta_std, &mean, &sd);
        let rule = if smoothed {
            TreatmentRule::smoothed_linear(theta, bandwidth)
        } else {
            TreatmentRule::linear_threshold(theta)
        };
        let Ok(rule) = rule else { return f64::NEG_INFINITY };
        let Ok(weights) = IpwWeights::for_rule(base, cohort, &rule) else {
            return f64::NEG_INFINITY;
        };
        let value = match tables {
            Some(tables) => value_ipw_km_augmented(&weights, tables),
            None => value_ipw_km(&weights),
        };
        match value {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    };

    let dim = cohort.p() + 1;
    let mut population: Vec<Vec<f64>> =
        (0..params.population).map(|_| random_unit(dim, rng)).collect();
    let mut fitness: Vec<f64> = population.par_iter().map(|t| objective(t)).collect();

    let mut best = argmax(&fitness);
    if fitness[best] == f64::NEG_INFINITY {
        return Err(RuleError::NoViableCandidate);
    }
    let mut best_theta = population[best].clone();
    let mut best_fit = fitness[best];
    let mut generations = 1;
    let mut stagnant = 0;

    let noise = Normal::new(0.0, params.mutation_sd)
        .expect("mutation_sd was validated to be positive and finite");
    while generations < params.generations && stagnant < params.stagnation {
        let mut next = Vec::with_capacity(params.population);
        next.push(best_theta.clone());
        while next.len() < params.population {
            let i = tournament_pick(&fitness, params.tournament, rng);
            let j = tournament_pick(&fitness, params.tournament, rng);
            let (mut c1, mut c2) = if rng.gen::<f64>() < params.crossover_prob {
                uniform_crossover(&population[i], &population[j], rng)
            } else {
                (population[i].clone(), population[j].clone())
            };
            for child in [&mut c1, &mut c2] {
                mutate(child, params.mutation_prob, &noise, rng);
                project_to_sphere(child, rng);
            }
            next.push(c1);
            if next.len() < params.population {
                next.push(c2);
            }
        }
        population = next;
        fitness = population.par_iter().map(|t| objective(t)).collect();
        generations += 1;

        best = argmax(&fitness);
        if fitness[best] > best_fit {
            best_fit = fitness[best];
            best_theta = population[best].clone();
            stagnant = 0;
        } else {
            stagnant += 1;
        }
    }

    let theta = unstandardize(&best_theta, &mean, &sd);
    let rule = TreatmentRule::linear_threshold(theta)?;
    Ok(FittedRule {
        method: variant.method(),
        rule,
        objective: Some(best_fit),
        diagnostics: vec![format!(
            "{generations} generations, best objective {best_fit:.6}, {stagnant} stagnant at stop"
        )],
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let theta: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return theta.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn tournament_pick<R: Rng>(fitness: &[f64], size: usize, rng: &mut R) -> usize {
    let mut best = rng.gen_range(0..fitness.len());
    for _ in 1..size {
        let challenger = rng.gen_range(0..fitness.len());
        if fitness[challenger] > fitness[best] {
            best = challenger;
        }
    }
    best
}

fn uniform_crossover<R: Rng>(a: &[f64], b: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    for j in 0..a.len() {
        if rng.gen::<f64>() < 0.5 {
            c1[j] = b[j];
            c2[j] = a[j];
        }
    }
    (c1, c2)
}

fn mutate<R: Rng>(theta: &mut [f64], prob: f64, noise: &Normal<f64>, rng: &mut R) {
    for gene in theta.iter_mut() {
        if rng.gen::<f64>() < prob {
            *gene += noise.sample(rng);
        }
    }
}

fn project_to_sphere<R: Rng>(theta: &mut Vec<f64>, rng: &mut R) {
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-9 {
        for v in theta.iter_mut() {
            *v /= norm;
        }
    } else {
        *theta = random_unit(theta.len(), rng);
    }
}

// ---------------------------------------------------------------------------
// Outcome-weighted learning
// ---------------------------------------------------------------------------

/// Learns a linear rule by weighted classification of the received
/// treatment: each subject observed past the horizon votes for the arm
/// they received, weighted by the inverse probability of surviving
/// uncensored past the horizon on that arm. The weighted hinge loss
/// with a ridge penalty on the slopes is minimized by stochastic
/// subgradient descent on standardized covariates with step size
/// `1 / (total_weight * mean_sq_row * sqrt(t))`, averaging the iterates
/// of the second half of the budget.
///
/// When no subject survives past the horizon every weight is zero and
/// the cohort carries no signal; the estimator falls back to the
/// majority received arm (ties to arm 0) and says so in the
/// diagnostics.
pub fn estimate_rule_weighted_classification<R: Rng>(
    cohort: &Cohort,
    base: &Arc<WeightBase>,
    params: &OwlParams,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    params.validate()?;
    base.check_same_cohort(cohort)?;
    let n = cohort.n();
    let p = cohort.p();
    let horizon = base.horizon();

    let weights: Vec<f64> = cohort
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| if r.z > horizon { base.survivor_weight(i) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let treated = cohort.records().iter().filter(|r| r.a == 1).count();
        let arm = u8::from(2 * treated > n);
        return Ok(FittedRule {
            method: Method::OwlLinear,
            rule: TreatmentRule::Static(arm),
            objective: None,
            diagnostics: vec![format!(
                "no subject observed past month {horizon}; using the majority arm {arm}"
            )],
        });
    }

    let (mean, sd) = column_stats(cohort);
    let width = p + 1;
    let mut design = Vec::with_capacity(n * width);
    for record in cohort.records() {
        design.push(1.0);
        for j in 0..p {
            design.push((record.x[j] - mean[j]) / sd[j]);
        }
    }
    let signs: Vec<f64> = cohort.records().iter().map(|r| 2.0 * f64::from(r.a) - 1.0).collect();
    let mean_sq_row =
        design.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let eta0 = 1.0 / (total * mean_sq_row);

    let mut theta = vec![0.0; width];
    let mut sum = vec![0.0; width];
    let half = params.steps / 2;
    for t in 1..=params.steps {
        let i = rng.gen_range(0..n);
        let eta = eta0 / (t as f64).sqrt();
        let row = &design[i * width..(i + 1) * width];
        if weights[i] > 0.0 {
            let margin: f64 = signs[i] * row.iter().zip(&theta).map(|(x, t)| x * t).sum::<f64>();
            if margin < 1.0 {
                let push = eta * n as f64 * weights[i] * signs[i];
                for (t, x) in theta.iter_mut().zip(row) {
                    *t += push * x;
                }
            }
        }
        let shrink = eta * 2.0 * params.regularization;
        for t in theta.iter_mut().skip(1) {
            *t -= shrink * *t;
        }
        if t > half {
            for (s, t) in sum.iter_mut().zip(&theta) {
                *s += t;
            }
        }
    }
    let count = (params.steps - half) as f64;
    let averaged: Vec<f64> = sum.into_iter().map(|s| s / count).collect();

    let mut objective =
        params.regularization * averaged[1..].iter().map(|v| v * v).sum::<f64>();
    for i in 0..n {
        if weights[i] <= 0.0 {
            continue;
        }
        let row = &design[i * width..(i + 1) * width];
        let margin: f64 =
            signs[i] * row.iter().zip(&averaged).map(|(x, t)| x * t).sum::<f64>();
        objective += weights[i] * (1.0 - margin).max(0.0);
    }

    let rule = TreatmentRule::linear_threshold(unstandardize(&averaged, &mean, &sd))?;
    Ok(FittedRule {
        method: Method::OwlLinear,
        rule,
        objective: Some(objective),
        diagnostics: vec![format!(
            "{} subgradient steps, final hinge objective {objective:.6}",
            params.steps
        )],
    })
}

// ---------------------------------------------------------------------------
// Dispatch and cross-fitting
// ---------------------------------------------------------------------------

/// Runs the estimator a spec names using already-fitted nuisance
/// models. Augmented methods need `nuisances.outcome`.
pub fn estimate_rule<R: Rng>(
    cohort: &Cohort,
    spec: &RuleEstimatorSpec,
    nuisances: &NuisanceSet,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    spec.validate()?;
    if let Some(kind) = spec.method.penalty_kind() {
        return estimate_rule_outcome_regression(cohort, kind, horizon, rng);
    }
    let base = Arc::new(WeightBase::new(cohort, &nuisances.propensity, &nuisances.censor, horizon)?);
    let tables = if spec.method.needs_outcome() {
        let outcome =
            nuisances.outcome.as_ref().ok_or(RuleError::MissingOutcome(spec.method))?;
        Some(AugmentationTables::new(cohort, outcome, &nuisances.censor, horizon)?)
    } else {
        None
    };
    estimate_prepared(cohort, spec, &base, tables.as_ref(), horizon, rng)
}

/// Like [`estimate_rule`] but with the weight base and augmentation
/// tables already built, so an ensemble can share them across
/// candidates.
fn estimate_prepared<R: Rng>(
    cohort: &Cohort,
    spec: &RuleEstimatorSpec,
    base: &Arc<WeightBase>,
    tables: Option<&AugmentationTables>,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    match spec.method {
        Method::CoxRidge | Method::CoxLasso | Method::CoxEnet => {
            let kind = spec.method.penalty_kind().expect("outcome-regression method");
            estimate_rule_outcome_regression(cohort, kind, horizon, rng)
        }
        Method::GaPlain | Method::GaAugmented | Method::GaSmoothed | Method::GaAugSmoothed => {
            let variant = spec.method.ga_variant().expect("genetic method");
            estimate_rule_genetic(cohort, variant, base, tables, &spec.ga, rng)
        }
        Method::OwlLinear => estimate_rule_weighted_classification(cohort, base, &spec.owl, rng),
        Method::MaxEnsemble => Err(RuleError::InvalidParam(
            "max_ensemble takes a candidate list; call max_ensemble instead".into(),
        )),
    }
}

/// Fits a spec on a cohort from scratch: outcome-regression methods run
/// directly, everything else first fits the nuisance models it needs.
/// This is what each cross-fitting fold runs on its training records.
fn estimate_for_spec<R: Rng>(
    cohort: &Cohort,
    spec: &RuleEstimatorSpec,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    if let Some(kind) = spec.method.penalty_kind() {
        estimate_rule_outcome_regression(cohort, kind, horizon, rng)
    } else {
        let nuisances = NuisanceSet::fit(cohort, spec.method.needs_outcome())?;
        estimate_rule(cohort, spec, &nuisances, horizon, rng)
    }
}

/// Runs `estimate` once per fold on that fold's training complement and
/// returns the per-fold rules in fold order. Each fold gets its own
/// seeded generator (seeds drawn up front from `rng`), so a fold's
/// result depends only on its training records and the master seed, and
/// folds can run in parallel without changing results.
pub fn crossfit_with<R, F>(
    cohort: &Cohort,
    folds: &FoldAssignment,
    rng: &mut R,
    estimate: F,
) -> Result<Vec<(TreatmentRule, Vec<String>)>, RuleError>
where
    R: Rng,
    F: Fn(&Cohort, usize, ChaCha12Rng) -> Result<(TreatmentRule, Vec<String>), RuleError> + Sync,
{
    if folds.n() != cohort.n() {
        return Err(RuleError::InvalidParam(format!(
            "fold assignment covers {} records but the cohort has {}",
            folds.n(),
            cohort.n()
        )));
    }
    let seeds: Vec<u64> = (0..folds.k()).map(|_| rng.gen()).collect();
    let fitted: Vec<Result<(TreatmentRule, Vec<String>), RuleError>> = seeds
        .into_par_iter()
        .enumerate()
        .map(|(fold, seed)| {
            let train = cohort.subset(&folds.train_indices(fold))?;
            let fold_rng = stream::derive_rng(seed, &[stream::FOLD]);
            estimate(&train, fold, fold_rng)
        })
        .collect();
    fitted.into_iter().collect()
}

/// Cross-fitted version of a single-method estimator: each fold's rule
/// is trained on the other folds' records (nuisance models refitted per
/// fold), and the folds are assembled into one rule that evaluates each
/// record with the member that held it out.
pub fn crossfit_rule_with<R: Rng>(
    cohort: &Cohort,
    spec: &RuleEstimatorSpec,
    folds: &FoldAssignment,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    spec.validate()?;
    let members = crossfit_with(cohort, folds, rng, |train, fold, mut fold_rng| {
        let fitted = estimate_for_spec(train, spec, horizon, &mut fold_rng)?;
        let diagnostics =
            fitted.diagnostics.iter().map(|d| format!("fold {fold}: {d}")).collect();
        Ok((fitted.rule, diagnostics))
    })?;
    let mut rules = Vec::with_capacity(members.len());
    let mut diagnostics = Vec::new();
    for (rule, notes) in members {
        rules.push(rule);
        diagnostics.extend(notes);
    }
    Ok(FittedRule {
        method: spec.method,
        rule: TreatmentRule::cross_fit(rules, folds.clone())?,
        objective: None,
        diagnostics,
    })
}

/// [`crossfit_rule_with`] over a fresh random `k`-fold split.
pub fn crossfit_rule<R: Rng>(
    cohort: &Cohort,
    spec: &RuleEstimatorSpec,
    k: usize,
    horizon: u32,
    rng: &mut R,
) -> Result<FittedRule, RuleError> {
    let folds = FoldAssignment::random(cohort.n(), k, rng)?;
    crossfit_rule_with(cohort, spec, &folds, horizon, rng)
}

// ---------------------------------------------------------------------------
// Max-value ensemble
// ---------------------------------------------------------------------------

/// How a rule estimator is trained: on the whole cohort, or cross-fitted
/// over folds. In an ensemble every candidate shares one fold split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Whole,
    #[serde(rename = "crossfit")]
    CrossFit,
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Whole => "whole",
            FitMode::CrossFit => "crossfit",
        })
    }
}

impl FromStr for FitMode {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole" => Ok(FitMode::Whole),
            "crossfit" => Ok(FitMode::CrossFit),
            _ => Err(RuleError::InvalidParam(format!("unknown fit mode '{s}'"))),
        }
    }
}

/// One ensemble candidate: a fitted rule with its estimated value when
/// the method succeeded, otherwise a note saying what failed.
#[derive(Clone, Debug)]
pub struct EnsembleCandidate {
    pub method: Method,
    pub rule: Option<TreatmentRule>,
    pub value: Option<f64>,
    pub note: Option<String>,
}

/// The ensemble's pick along with every candidate it considered, so
/// audit output can show the comparison that produced the choice.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub mode: FitMode,
    /// Index into `candidates` of the winner.
    pub chosen: usize,
    pub candidates: Vec<EnsembleCandidate>,
}

impl EnsembleResult {
    pub fn chosen_method(&self) -> Method {
        self.candidates[self.chosen].method
    }

    pub fn chosen_rule(&self) -> &TreatmentRule {
        self.candidates[self.chosen]
            .rule
            .as_ref()
            .expect("the chosen candidate always carries a rule")
    }

    pub fn chosen_value(&self) -> f64 {
        self.candidates[self.chosen].value.expect("the chosen candidate always carries a value")
    }

    /// JSON description for audit output.
    pub fn describe(&self) -> serde_json::Value {
        json!({
            "mode": self.mode.to_string(),
            "chosen": self.chosen,
            "candidates": self
                .candidates
                .iter()
                .map(|c| {
                    json!({
                        "method": c.method.id(),
                        "value": c.value,
                        "note": c.note,
                        "rule": c.rule.as_ref().map(|r| r.describe()),
                    })
                })
                .collect::<Vec<_>>(),
        })
    }
}

/// Picks the candidate with the highest value estimate; earlier
/// candidates win exact ties. Candidates without both a rule and a
/// value are skipped; if that leaves nothing, the ensemble failed.
pub fn pick_max_value(
    mode: FitMode,
    candidates: Vec<EnsembleCandidate>,
) -> Result<EnsembleResult, RuleError> {
    let mut chosen: Option<(usize, f64)> = None;
    for (i, candidate) in candidates.iter().enumerate() {
        let (Some(value), Some(_)) = (candidate.value, candidate.rule.as_ref()) else {
            continue;
        };
        if chosen.map_or(true, |(_, best)| value > best) {
            chosen = Some((i, value));
        }
    }
    match chosen {
        Some((chosen, _)) => Ok(EnsembleResult { mode, chosen, candidates }),
        None => Err(RuleError::AllCandidatesFailed),
    }
}

/// Trains every candidate spec and keeps the rule with the highest
/// weighted product-limit value on the cohort. In `Whole` mode the
/// candidates train on the full cohort and share one set of nuisance
/// models; in `CrossFit` mode each candidate is cross-fitted over the
/// same `folds_k`-fold split and judged by the value of its assembled
/// rule. A candidate that fails is recorded with a note and skipped;
/// the ensemble errors only when no candidate survives.
pub fn max_ensemble<R: Rng>(
    cohort: &Cohort,
    specs: &[RuleEstimatorSpec],
    mode: FitMode,
    folds_k: usize,
    horizon: u32,
    rng: &mut R,
) -> Result<EnsembleResult, RuleError> {
    if specs.is_empty() {
        return Err(RuleError::InvalidParam("the ensemble needs at least one candidate".into()));
    }
    for spec in specs {
        spec.validate()?;
    }

    let whole_outcome =
        mode == FitMode::Whole && specs.iter().any(|s| s.method.needs_outcome());
    let nuisances = NuisanceSet::fit(cohort, whole_outcome)?;
    let base =
        Arc::new(WeightBase::new(cohort, &nuisances.propensity, &nuisances.censor, horizon)?);
    let tables = match &nuisances.outcome {
        Some(outcome) => Some(AugmentationTables::new(cohort, outcome, &nuisances.censor, horizon)?),
        None => None,
    };
    let shared_folds = match mode {
        FitMode::Whole => None,
        FitMode::CrossFit => Some(FoldAssignment::random(cohort.n(), folds_k, rng)?),
    };
    let seeds: Vec<u64> = specs.iter().map(|_| rng.gen()).collect();

    let candidates = specs
        .iter()
        .zip(&seeds)
        .map(|(spec, &seed)| {
            let mut method_rng = stream::derive_rng(seed, &[stream::METHOD]);
            let fitted = match &shared_folds {
                None => estimate_prepared(cohort, spec, &base, tables.as_ref(), horizon, &mut method_rng),
                Some(folds) => crossfit_rule_with(cohort, spec, folds, horizon, &mut method_rng),
            };
            score_candidate(cohort, spec.method, &base, fitted)
        })
        .collect();
    pick_max_value(mode, candidates)
}

/// Attaches the whole-cohort value estimate to a fitted candidate, or
/// converts its failure into a note.
fn score_candidate(
    cohort: &Cohort,
    method: Method,
    base: &Arc<WeightBase>,
    fitted: Result<FittedRule, RuleError>,
) -> EnsembleCandidate {
    match fitted {
        Ok(fitted) => {
            let value = IpwWeights::for_rule(base, cohort, &fitted.rule)
                .and_then(|weights| value_ipw_km(&weights));
            match value {
                Ok(v) if v.is_finite() => EnsembleCandidate {
                    method,
                    rule: Some(fitted.rule),
                    value: Some(v),
                    note: None,
                },
                Ok(v) => EnsembleCandidate {
                    method,
                    rule: Some(fitted.rule),
                    value: None,
                    note: Some(format!("value estimate {v} is not finite")),
                },
                Err(err) => EnsembleCandidate {
                    method,
                    rule: Some(fitted.rule),
                    value: None,
                    note: Some(format!("value estimation failed: {err}")),
                },
            }
        }
        Err(err) => EnsembleCandidate {
            method,
            rule: None,
            value: None,
            note: Some(format!("estimation failed: {err}")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate_cohort, CovariateModel, ScenarioSpec};
    use crate::model::ObservedRecord;

    fn scenario_cohort(n: usize, seed: u64) -> Cohort {
        let scenario = ScenarioSpec::builtin(0).unwrap();
        let model = CovariateModel::default();
        let mut rng = stream::derive_rng(seed, &[stream::DATA]);
        generate_cohort(&scenario, &model, n, &mut rng).unwrap().cohort
    }

    fn fitted_base(cohort: &Cohort, horizon: u32) -> Arc<WeightBase> {
        let nuisances = NuisanceSet::fit(cohort, false).unwrap();
        Arc::new(WeightBase::new(cohort, &nuisances.propensity, &nuisances.censor, horizon).unwrap())
    }

    /// Randomized single-covariate cohort on a grid over [-1, 1]. The
    /// received arm alternates independently of x, and a subject
    /// survives past any horizon exactly when the received arm matches
    /// `I(x < 0)`; everyone else dies in month 1.
    fn separable_value_cohort(n: usize) -> Cohort {
        let records = (0..n)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                let a = (i % 2) as u8;
                let optimal = u8::from(x < 0.0);
                let (z, delta) = if a == optimal { (61, 0) } else { (1, 1) };
                ObservedRecord::new(z, delta, a, vec![x]).unwrap()
            })
            .collect();
        Cohort::new(records).unwrap()
    }

    /// Unit base weights at treatment probability 1/2: every month and
    /// the survivor indicator get weight 2 for matched records.
    fn randomized_base(cohort: &Cohort, horizon: u32, survivor_survival: f64) -> Arc<WeightBase> {
        let n = cohort.n();
        let mut row = vec![1.0; horizon as usize + 1];
        *row.last_mut().unwrap() = survivor_survival;
        let rows = vec![row; n];
        Arc::new(WeightBase::from_probabilities(cohort, &vec![0.5; n], &rows, horizon).unwrap())
    }

    #[test]
    fn method_ids_round_trip() {
        for method in Method::ALL {
            assert_eq!(Method::parse(method.id()), Some(method));
            assert_eq!(method.id().parse::<Method>().unwrap(), method);
        }
        assert!(Method::parse("nearest_neighbor").is_none());
        assert!("".parse::<Method>().is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        let mut spec = RuleEstimatorSpec::new(Method::GaPlain);
        spec.ga.population = 1;
        assert!(spec.validate().is_err());

        let mut spec = RuleEstimatorSpec::new(Method::GaPlain);
        spec.ga.tournament = 0;
        assert!(spec.validate().is_err());
        spec.ga.tournament = 99;
        assert!(spec.validate().is_err());

        let mut spec = RuleEstimatorSpec::new(Method::GaSmoothed);
        spec.ga.bandwidth = 0.0;
        assert!(spec.validate().is_err());

        let mut spec = RuleEstimatorSpec::new(Method::GaPlain);
        spec.ga.crossover_prob = 1.5;
        assert!(spec.validate().is_err());
        spec.ga.crossover_prob = 0.7;
        spec.ga.mutation_sd = 0.0;
        assert!(spec.validate().is_err());

        let mut spec = RuleEstimatorSpec::new(Method::OwlLinear);
        spec.owl.steps = 0;
        assert!(spec.validate().is_err());
        spec.owl.steps = 100;
        spec.owl.regularization = -1.0;
        assert!(spec.validate().is_err());

        assert!(RuleEstimatorSpec::new(Method::MaxEnsemble).validate().is_err());
    }

    #[test]
    fn plug_in_scores_from_a_treatment_blind_model_pick_arm_zero() {
        let cohort = scenario_cohort(120, 41);
        let design = Design::from_cohort(&cohort, DesignKind::CovariatesOnly);
        let times: Vec<u32> = cohort.records().iter().map(|r| r.z).collect();
        let events: Vec<u8> = cohort.records().iter().map(|r| r.delta).collect();
        let model =
            Arc::new(crate::nuisance::fit_cox(&times, &events, &design, None, None).unwrap());
        let rule = TreatmentRule::PlugIn {
            arm0: Arc::new(CoxArmScore::new(Arc::clone(&model), 0, 60).unwrap()),
            arm1: Arc::new(CoxArmScore::new(model, 1, 60).unwrap()),
        };
        for record in cohort.records() {
            assert_eq!(rule.evaluate(&record.x).unwrap(), 0);
        }
    }

    #[test]
    fn outcome_regression_produces_a_plug_in_rule() {
        let cohort = scenario_cohort(260, 42);
        let mut rng = stream::derive_rng(42, &[stream::METHOD]);
        let fitted =
            estimate_rule_outcome_regression(&cohort, PenaltyKind::Ridge, 60, &mut rng).unwrap();
        assert_eq!(fitted.method, Method::CoxRidge);
        assert!(matches!(fitted.rule, TreatmentRule::PlugIn { .. }));
        assert!(fitted.diagnostics.iter().any(|d| d.contains("penalty weight")));
        for record in cohort.records() {
            assert!(fitted.rule.evaluate(&record.x).unwrap() <= 1);
        }
        let json = fitted.describe();
        assert_eq!(json["method"], "cox_ridge");
        assert_eq!(json["rule"]["type"], "plug_in");
    }

    #[test]
    fn outcome_regression_falls_back_when_an_arm_has_no_events() {
        // Arm 1 is all administratively censored survivors; arm 0 has
        // real events, so the marginal comparison favors arm 1.
        let records: Vec<ObservedRecord> = (0..40)
            .map(|i| {
                let x = vec![i as f64 / 40.0];
                if i % 2 == 0 {
                    ObservedRecord::new(61, 0, 1, x).unwrap()
                } else {
                    ObservedRecord::new(1 + (i as u32 % 30), (i % 3 == 1) as u8, 0, x).unwrap()
                }
            })
            .collect();
        let cohort = Cohort::new(records).unwrap();
        let mut rng = stream::derive_rng(7, &[stream::METHOD]);
        let fitted =
            estimate_rule_outcome_regression(&cohort, PenaltyKind::Lasso, 60, &mut rng).unwrap();
        assert!(matches!(fitted.rule, TreatmentRule::Static(1)));
        assert!(fitted.diagnostics[0].contains("no events in arm 1"));
    }

    #[test]
    fn genetic_search_recovers_a_separable_boundary() {
        let cohort = separable_value_cohort(200);
        let base = randomized_base(&cohort, 5, 1.0);
        let params = GaParams {
            population: 30,
            generations: 40,
            stagnation: 15,
            ..GaParams::default()
        };
        let mut rng = stream::derive_rng(11, &[stream::METHOD]);
        let fitted =
            estimate_rule_genetic(&cohort, GaVariant::Plain, &base, None, &params, &mut rng)
                .unwrap();
        assert!(matches!(fitted.rule, TreatmentRule::LinearThreshold(_)));
        let agreement = cohort
            .records()
            .iter()
            .filter(|r| {
                fitted.rule.evaluate(&r.x).unwrap() == u8::from(r.x[0] < 0.0)
            })
            .count() as f64
            / cohort.n() as f64;
        assert!(agreement >= 0.9, "agreement {agreement}");
        assert!(fitted.objective.unwrap() >= 0.9);
    }

    #[test]
    fn genetic_objective_matches_an_independent_recompute() {
        let cohort = scenario_cohort(350, 43);
        let nuisances = NuisanceSet::fit(&cohort, true).unwrap();
        let base = Arc::new(
            WeightBase::new(&cohort, &nuisances.propensity, &nuisances.censor, 60).unwrap(),
        );
        let tables =
            AugmentationTables::new(&cohort, nuisances.outcome.as_ref().unwrap(), &nuisances.censor, 60)
                .unwrap();
        let params = GaParams {
            population: 12,
            generations: 8,
            stagnation: 5,
            ..GaParams::default()
        };
        for variant in [
            GaVariant::Plain,
            GaVariant::Augmented,
            GaVariant::Smoothed,
            GaVariant::AugmentedSmoothed,
        ] {
            let mut rng = stream::derive_rng(19, &[stream::METHOD]);
            let fitted =
                estimate_rule_genetic(&cohort, variant, &base, Some(&tables), &params, &mut rng)
                    .unwrap();
            let TreatmentRule::LinearThreshold(theta) = &fitted.rule else {
                panic!("genetic search returns a hard linear rule");
            };
            let search_rule = if variant.smoothed() {
                TreatmentRule::smoothed_linear(theta.clone(), params.bandwidth).unwrap()
            } else {
                fitted.rule.clone()
            };
            let weights = IpwWeights::for_rule(&base, &cohort, &search_rule).unwrap();
            let recomputed = if variant.augmented() {
                value_ipw_km_augmented(&weights, &tables).unwrap()
            } else {
                value_ipw_km(&weights).unwrap()
            };
            assert!(
                (recomputed - fitted.objective.unwrap()).abs() <= 1e-12,
                "{variant:?}: {recomputed} vs {:?}",
                fitted.objective
            );
        }
    }

    #[test]
    fn tiny_bandwidth_smoothing_matches_the_hard_value() {
        let cohort = scenario_cohort(300, 44);
        let base = fitted_base(&cohort, 60);
        let mut theta = vec![0.0; cohort.p() + 1];
        theta[0] = 0.3;
        theta[18] = -0.8;
        theta[19] = 0.5;
        let hard = TreatmentRule::linear_threshold(theta.clone()).unwrap();
        let soft = TreatmentRule::smoothed_linear(theta, 1e-8).unwrap();
        let v_hard =
            value_ipw_km(&IpwWeights::for_rule(&base, &cohort, &hard).unwrap()).unwrap();
        let v_soft =
            value_ipw_km(&IpwWeights::for_rule(&base, &cohort, &soft).unwrap()).unwrap();
        assert!((v_hard - v_soft).abs() <= 0.005, "{v_hard} vs {v_soft}");
    }

    #[test]
    fn weighted_classification_separates_a_clean_cohort() {
        // Everyone survives past the horizon with equal weight, and the
        // received arm is I(x > 0), so the hinge minimizer classifies
        // by the sign of x.
        let records: Vec<ObservedRecord> = (0..100)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / 99.0;
                ObservedRecord::new(61, 0, u8::from(x > 0.0), vec![x]).unwrap()
            })
            .collect();
        let cohort = Cohort::new(records).unwrap();
        let base = randomized_base(&cohort, 5, 1.0);
        let params = OwlParams { regularization: 1.0, steps: 20_000 };
        let mut rng = stream::derive_rng(23, &[stream::METHOD]);
        let fitted =
            estimate_rule_weighted_classification(&cohort, &base, &params, &mut rng).unwrap();
        for record in cohort.records() {
            if record.x[0].abs() >= 0.1 {
                assert_eq!(fitted.rule.evaluate(&record.x).unwrap(), record.a);
            }
        }
        assert!(fitted.objective.unwrap().is_finite());
    }

    #[test]
    fn weighted_classification_is_invariant_to_weight_and_penalty_scale() {
        let records: Vec<ObservedRecord> = (0..64)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / 63.0;
                ObservedRecord::new(61, 0, (i % 2) as u8, vec![x]).unwrap()
            })
            .collect();
        let cohort = Cohort::new(records).unwrap();
        // Halving the survivor-month censoring survival doubles every
        // classification weight; doubling the penalty with it leaves
        // the whole optimization, and hence the rule, unchanged.
        let base_a = randomized_base(&cohort, 5, 1.0);
        let base_b = randomized_base(&cohort, 5, 0.5);
        let params_a = OwlParams { regularization: 1.0, steps: 5_000 };
        let params_b = OwlParams { regularization: 2.0, steps: 5_000 };
        let mut rng_a = stream::derive_rng(29, &[stream::METHOD]);
        let mut rng_b = stream::derive_rng(29, &[stream::METHOD]);
        let fitted_a =
            estimate_rule_weighted_classification(&cohort, &base_a, &params_a, &mut rng_a)
                .unwrap();
        let fitted_b =
            estimate_rule_weighted_classification(&cohort, &base_b, &params_b, &mut rng_b)
                .unwrap();
        let TreatmentRule::LinearThreshold(theta_a) = &fitted_a.rule else { panic!() };
        let TreatmentRule::LinearThreshold(theta_b) = &fitted_b.rule else { panic!() };
        assert_eq!(theta_a, theta_b);
    }

    #[test]
    fn weighted_classification_with_no_survivors_uses_the_majority_arm() {
        let records: Vec<ObservedRecord> = (0..10)
            .map(|i| {
                ObservedRecord::new(1 + i as u32, 1, u8::from(i < 7), vec![i as f64]).unwrap()
            })
            .collect();
        let cohort = Cohort::new(records).unwrap();
        let base = randomized_base(&cohort, 30, 1.0);
        let mut rng = stream::derive_rng(31, &[stream::METHOD]);
        let fitted = estimate_rule_weighted_classification(
            &cohort,
            &base,
            &OwlParams::default(),
            &mut rng,
        )
        .unwrap();
        assert!(matches!(fitted.rule, TreatmentRule::Static(1)));
        assert!(fitted.diagnostics[0].contains("majority arm"));
        assert!(fitted.objective.is_none());
    }

    #[test]
    fn crossfit_members_see_only_their_training_complement() {
        let make_cohort = |poison: bool| {
            let records: Vec<ObservedRecord> = (0..30)
                .map(|i| {
                    let z = if poison && i % 3 == 1 { 1 } else { 2 + (i as u32 % 50) };
                    ObservedRecord::new(z, 1, (i % 2) as u8, vec![i as f64]).unwrap()
                })
                .collect();
            Cohort::new(records).unwrap()
        };
        let folds = FoldAssignment::new((0..30).map(|i| i % 3).collect(), 3).unwrap();
        let mean_z_rule = |train: &Cohort, _fold: usize, _rng: ChaCha12Rng| {
            let mean =
                train.records().iter().map(|r| f64::from(r.z)).sum::<f64>() / train.n() as f64;
            Ok((TreatmentRule::linear_threshold(vec![mean, 0.0]).unwrap(), Vec::new()))
        };

        let mut rng = stream::derive_rng(37, &[stream::FOLDS]);
        let clean = crossfit_with(&make_cohort(false), &folds, &mut rng, mean_z_rule).unwrap();
        let mut rng = stream::derive_rng(37, &[stream::FOLDS]);
        let poisoned = crossfit_with(&make_cohort(true), &folds, &mut rng, mean_z_rule).unwrap();

        let theta = |rule: &TreatmentRule| match rule {
            TreatmentRule::LinearThreshold(t) => t.clone(),
            _ => panic!("closure builds linear rules"),
        };
        // Fold 1 trains on folds 0 and 2, so poisoning fold 1's records
        // cannot move it; the other members do shift.
        assert_eq!(theta(&clean[1].0), theta(&poisoned[1].0));
        assert_ne!(theta(&clean[0].0), theta(&poisoned[0].0));
        assert_ne!(theta(&clean[2].0), theta(&poisoned[2].0));
    }

    #[test]
    fn crossfit_rule_assembles_indexed_members() {
        let cohort = scenario_cohort(240, 45);
        let mut spec = RuleEstimatorSpec::new(Method::OwlLinear);
        spec.owl.steps = 2_000;
        let mut rng = stream::derive_rng(41, &[stream::FOLDS]);
        let fitted = crossfit_rule(&cohort, &spec, 3, 60, &mut rng).unwrap();
        assert!(matches!(fitted.rule, TreatmentRule::CrossFit { .. }));
        assert!(fitted.objective.is_none());
        for (i, record) in cohort.records().iter().enumerate() {
            assert!(fitted.rule.evaluate_indexed(&record.x, Some(i)).unwrap() <= 1);
        }
        assert!(fitted.rule.evaluate(&cohort.records()[0].x).is_err());
        assert_eq!(fitted.describe()["rule"]["type"], "cross_fit");
    }

    #[test]
    fn missing_outcome_model_is_reported() {
        let cohort = scenario_cohort(150, 46);
        let nuisances = NuisanceSet::fit(&cohort, false).unwrap();
        let spec = RuleEstimatorSpec::new(Method::GaAugmented);
        let mut rng = stream::derive_rng(43, &[stream::METHOD]);
        let err = estimate_rule(&cohort, &spec, &nuisances, 60, &mut rng).unwrap_err();
        assert!(matches!(err, RuleError::MissingOutcome(Method::GaAugmented)));
    }

    #[test]
    fn pick_max_value_prefers_the_highest_and_skips_failures() {
        let candidate = |method, value: Option<f64>| EnsembleCandidate {
            method,
            rule: value.map(|_| TreatmentRule::Static(0)),
            value,
            note: None,
        };
        let result = pick_max_value(
            FitMode::Whole,
            vec![
                candidate(Method::CoxLasso, Some(0.3)),
                candidate(Method::GaPlain, Some(0.5)),
                candidate(Method::OwlLinear, None),
            ],
        )
        .unwrap();
        assert_eq!(result.chosen, 1);
        assert_eq!(result.chosen_method(), Method::GaPlain);
        assert_eq!(result.chosen_value(), 0.5);

        let tie = pick_max_value(
            FitMode::Whole,
            vec![candidate(Method::CoxLasso, Some(0.5)), candidate(Method::GaPlain, Some(0.5))],
        )
        .unwrap();
        assert_eq!(tie.chosen, 0);

        let failed = pick_max_value(
            FitMode::CrossFit,
            vec![candidate(Method::CoxLasso, None), candidate(Method::GaPlain, None)],
        );
        assert!(matches!(failed, Err(RuleError::AllCandidatesFailed)));

        // A value without a rule cannot win.
        let mut orphan = candidate(Method::CoxLasso, Some(0.9));
        orphan.rule = None;
        let result = pick_max_value(
            FitMode::Whole,
            vec![orphan, candidate(Method::GaPlain, Some(0.2))],
        )
        .unwrap();
        assert_eq!(result.chosen, 1);
    }

    #[test]
    fn failed_candidates_are_noted_not_fatal() {
        let cohort = scenario_cohort(150, 47);
        let base = fitted_base(&cohort, 60);
        let spec = RuleEstimatorSpec::new(Method::GaAugmented);
        let mut rng = stream::derive_rng(47, &[stream::METHOD]);
        let fitted = estimate_prepared(&cohort, &spec, &base, None, 60, &mut rng);
        let candidate = score_candidate(&cohort, spec.method, &base, fitted);
        assert!(candidate.rule.is_none());
        assert!(candidate.value.is_none());
        assert!(candidate.note.unwrap().contains("outcome"));
    }

    #[test]
    fn ensemble_returns_the_single_candidate() {
        let cohort = scenario_cohort(250, 48);
        let mut spec = RuleEstimatorSpec::new(Method::OwlLinear);
        spec.owl.steps = 3_000;
        let mut rng = stream::derive_rng(53, &[stream::METHOD]);
        let result =
            max_ensemble(&cohort, &[spec], FitMode::Whole, 2, 60, &mut rng).unwrap();
        assert_eq!(result.candidates.len(), 1);
        assert_eq!(result.chosen, 0);
        assert_eq!(result.chosen_method(), Method::OwlLinear);
        assert!(result.chosen_value().is_finite());
        let json = result.describe();
        assert_eq!(json["mode"], "whole");
        assert_eq!(json["candidates"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn ensemble_chooses_the_candidate_with_the_higher_value() {
        let cohort = scenario_cohort(300, 49);
        let mut owl = RuleEstimatorSpec::new(Method::OwlLinear);
        owl.owl.steps = 3_000;
        let mut ga = RuleEstimatorSpec::new(Method::GaPlain);
        ga.ga = GaParams { population: 10, generations: 6, stagnation: 4, ..GaParams::default() };
        let mut rng = stream::derive_rng(59, &[stream::METHOD]);
        let result =
            max_ensemble(&cohort, &[owl, ga], FitMode::Whole, 2, 60, &mut rng).unwrap();
        assert_eq!(result.candidates.len(), 2);
        let chosen_value = result.chosen_value();
        for candidate in &result.candidates {
            if let Some(value) = candidate.value {
                assert!(chosen_value >= value);
            }
        }
    }

    #[test]
    fn ensemble_crossfit_mode_builds_indexed_rules() {
        let cohort = scenario_cohort(240, 50);
        let mut spec = RuleEstimatorSpec::new(Method::OwlLinear);
        spec.owl.steps = 1_500;
        let mut rng = stream::derive_rng(61, &[stream::METHOD]);
        let result =
            max_ensemble(&cohort, &[spec], FitMode::CrossFit, 3, 60, &mut rng).unwrap();
        assert!(matches!(result.chosen_rule(), TreatmentRule::CrossFit { .. }));
        assert!(result.chosen_value().is_finite());
        assert_eq!(result.describe()["mode"], "crossfit");
    }

    #[test]
    fn ensemble_rejects_an_empty_candidate_list() {
        let cohort = scenario_cohort(150, 51);
        let mut rng = stream::derive_rng(67, &[stream::METHOD]);
        let err = max_ensemble(&cohort, &[], FitMode::Whole, 2, 60, &mut rng).unwrap_err();
        assert!(matches!(err, RuleError::InvalidParam(_)));
    }
}
