//! Core data types: observed records, cohorts, treatment rules, step
//! survival curves, and cross-fitting fold assignments.
//!
//! Follow-up time is coarsened to whole months. Month `z` covers the
//! interval `(z - 1, z]`, the decision horizon of interest is typically
//! month 60, and month 61 stands for "still at risk when the study ended".

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numeric::normal_cdf;

/// Largest representable follow-up month (end of study).
pub const MAX_MONTH: u32 = 61;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("follow-up month {0} outside [1, {MAX_MONTH}]")]
    InvalidMonth(u32),
    #[error("{name} must be 0 or 1, got {value}")]
    InvalidFlag { name: &'static str, value: u8 },
    #[error("covariate {index} is not finite")]
    NonFiniteCovariate { index: usize },
    #[error("cohort needs at least 2 records, got {0}")]
    CohortTooSmall(usize),
    #[error("record {index} has {got} covariates, expected {expected}")]
    InconsistentWidth { index: usize, expected: usize, got: usize },
    #[error("covariate names ({names}) do not match covariate count {width}")]
    NameCountMismatch { names: usize, width: usize },
    #[error("rule expects {expected} covariates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cross-fitted rule evaluation needs a record index")]
    IndexRequired,
    #[error("record index {index} out of range for {n} records")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("soft evaluation is only defined for smoothed linear rules")]
    NotSmoothed,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("linear rule coefficients must be finite")]
    NonFiniteCoefficient,
    #[error("invalid survival curve: {0}")]
    InvalidCurve(String),
    #[error("invalid fold assignment: {0}")]
    InvalidFolds(String),
    #[error("malformed cohort CSV: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One subject: coarsened follow-up month, event indicator, assigned
/// treatment arm, and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    /// Follow-up month, in [1, [`MAX_MONTH`]].
    pub z: u32,
    /// 1 if the event was observed in month `z`, 0 if follow-up was
    /// censored there.
    pub delta: u8,
    /// Treatment arm actually received.
    pub a: u8,
    /// Covariate vector; finite entries, same length across a cohort.
    pub x: Vec<f64>,
}

impl ObservedRecord {
    pub fn new(z: u32, delta: u8, a: u8, x: Vec<f64>) -> Result<Self, ModelError> {
        if !(1..=MAX_MONTH).contains(&z) {
            return Err(ModelError::InvalidMonth(z));
        }
        if delta > 1 {
            return Err(ModelError::InvalidFlag { name: "delta", value: delta });
        }
        if a > 1 {
            return Err(ModelError::InvalidFlag { name: "a", value: a });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteCovariate { index });
        }
        Ok(ObservedRecord { z, delta, a, x })
    }
}

/// A set of observed records with a shared covariate layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<ObservedRecord>,
    covariate_names: Vec<String>,
}

impl Cohort {
    /// Build a cohort, validating size and width consistency. Covariate
    /// names default to `x1..xp`.
    pub fn new(records: Vec<ObservedRecord>) -> Result<Self, ModelError> {
        let p = records.first().map(|r| r.x.len()).unwrap_or(0);
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Cohort::with_names(records, names)
    }

    pub fn with_names(
        records: Vec<ObservedRecord>,
        covariate_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        if records.len() < 2 {
            return Err(ModelError::CohortTooSmall(records.len()));
        }
        let expected = records[0].x.len();
        for (index, r) in records.iter().enumerate() {
            if r.x.len() != expected {
                return Err(ModelError::InconsistentWidth { index, expected, got: r.x.len() });
            }
        }
        if covariate_names.len() != expected {
            return Err(ModelError::NameCountMismatch {
                names: covariate_names.len(),
                width: expected,
            });
        }
        Ok(Cohort { records, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Number of covariates per record.
    pub fn p(&self) -> usize {
        self.records[0].x.len()
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Sub-cohort of the given record indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ModelError> {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or(ModelError::IndexOutOfRange { index: i, n: self.n() })?;
            records.push(r.clone());
        }
        Cohort::with_names(records, self.covariate_names.clone())
    }

    /// Number of records with an observed event.
    pub fn event_count(&self) -> usize {
        self.records.iter().filter(|r| r.delta == 1).count()
    }

    /// Write the cohort as CSV with header `z,delta,a,<covariate names>`.
    /// Binary covariates print as integers, continuous ones as shortest
    /// round-trip decimals.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["z".to_string(), "delta".to_string(), "a".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(3 + self.p());
        for r in &self.records {
            row.clear();
            row.push(r.z.to_string());
            row.push(r.delta.to_string());
            row.push(r.a.to_string());
            row.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[0] != "z" || cols[1] != "delta" || cols[2] != "a" {
            return Err(ModelError::MalformedCsv(
                "header must start with z,delta,a and list at least one covariate".into(),
            ));
        }
        let covariate_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
        let mut records = Vec::new();
        for (line, row) in r.records().enumerate() {
            let row = row?;
            if row.len() != cols.len() {
                return Err(ModelError::MalformedCsv(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    row.len(),
                    cols.len()
                )));
            }
            let parse_err = |field: &str, what: &str| {
                ModelError::MalformedCsv(format!(
                    "row {}: cannot parse {what} from {field:?}",
                    line + 1
                ))
            };
            let z: u32 = row[0].parse().map_err(|_| parse_err(&row[0], "z"))?;
            let delta: u8 = row[1].parse().map_err(|_| parse_err(&row[1], "delta"))?;
            let a: u8 = row[2].parse().map_err(|_| parse_err(&row[2], "a"))?;
            let mut x = Vec::with_capacity(covariate_names.len());
            for field in row.iter().skip(3) {
                x.push(field.parse::<f64>().map_err(|_| parse_err(field, "covariate"))?);
            }
            records.push(ObservedRecord::new(z, delta, a, x)?);
        }
        Cohort::with_names(records, covariate_names)
    }

    pub fn write_csv_file<P: AsRef<Path>>(&self, path: P) -> Result<(), ModelError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P) -> Result<Self, ModelError> {
        Cohort::read_csv(std::fs::File::open(path)?)
    }
}

/// Survival probability past the decision horizon for one treatment arm,
/// as a function of covariates. Used by plug-in rules.
pub trait SurvivalScore: Send + Sync {
    fn survival(&self, x: &[f64]) -> f64;
    /// JSON description suitable for audit output.
    fn describe(&self) -> serde_json::Value;
}

/// A deterministic mapping from covariates to a treatment arm.
#[derive(Clone)]
pub enum TreatmentRule {
    /// Everyone gets the given arm.
    Static(u8),
    /// Treat when `theta[0] + theta[1..] . x > 0`; the boundary itself maps
    /// to arm 0.
    LinearThreshold(Vec<f64>),
    /// Linear rule whose soft assignment is `Phi((theta . x) / bandwidth)`.
    /// Hard evaluation thresholds at zero like [`TreatmentRule::LinearThreshold`].
    SmoothedLinear { theta: Vec<f64>, bandwidth: f64 },
    /// Treat when the arm-1 survival score strictly exceeds the arm-0 score.
    PlugIn { arm0: Arc<dyn SurvivalScore>, arm1: Arc<dyn SurvivalScore> },
    /// One rule per cross-fitting fold; record `i` is evaluated by the rule
    /// of the fold that held `i` out.
    CrossFit { rules: Vec<TreatmentRule>, assignment: FoldAssignment },
}

impl TreatmentRule {
    pub fn smoothed_linear(theta: Vec<f64>, bandwidth: f64) -> Result<Self, ModelError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(ModelError::InvalidBandwidth(bandwidth));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::NonFiniteCoefficient);
        }
        Ok(TreatmentRule::SmoothedLinear { theta, bandwidth })
    }

    pub fn linear_threshold(theta: Vec<f64>) -> Result<Self, ModelError> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::NonFiniteCoefficient);
        }
        Ok(TreatmentRule::LinearThreshold(theta))
    }

    pub fn cross_fit(rules: Vec<TreatmentRule>, assignment: FoldAssignment) -> Result<Self, ModelError> {
        if rules.len() != assignment.k() {
            return Err(ModelError::InvalidFolds(format!(
                "{} member rules for {} folds",
                rules.len(),
                assignment.k()
            )));
        }
        if rules.iter().any(|r| matches!(r, TreatmentRule::CrossFit { .. })) {
            return Err(ModelError::InvalidFolds("cross-fitted rules cannot nest".into()));
        }
        Ok(TreatmentRule::CrossFit { rules, assignment })
    }

    fn linear_score(theta: &[f64], x: &[f64]) -> Result<f64, ModelError> {
        if theta.len() != x.len() + 1 {
            return Err(ModelError::DimensionMismatch {
                expected: theta.len().saturating_sub(1),
                got: x.len(),
            });
        }
        let mut s = theta[0];
        for (t, v) in theta[1..].iter().zip(x) {
            s += t * v;
        }
        Ok(s)
    }

    /// Hard treatment decision for a covariate vector. Cross-fitted rules
    /// need [`TreatmentRule::evaluate_indexed`] instead.
    pub fn evaluate(&self, x: &[f64]) -> Result<u8, ModelError> {
        self.evaluate_indexed(x, None)
    }

    /// Hard treatment decision; `index` identifies the record within the
    /// cohort a cross-fitted rule was built on.
    pub fn evaluate_indexed(&self, x: &[f64], index: Option<usize>) -> Result<u8, ModelError> {
        match self {
            TreatmentRule::Static(a) => Ok(*a),
            TreatmentRule::LinearThreshold(theta) => {
                Ok(if Self::linear_score(theta, x)? > 0.0 { 1 } else { 0 })
            }
            TreatmentRule::SmoothedLinear { theta, .. } => {
                Ok(if Self::linear_score(theta, x)? > 0.0 { 1 } else { 0 })
            }
            TreatmentRule::PlugIn { arm0, arm1 } => {
                Ok(if arm1.survival(x) > arm0.survival(x) { 1 } else { 0 })
            }
            TreatmentRule::CrossFit { rules, assignment } => {
                let index = index.ok_or(ModelError::IndexRequired)?;
                if index >= assignment.n() {
                    return Err(ModelError::IndexOutOfRange { index, n: assignment.n() });
                }
                rules[assignment.fold_of(index)].evaluate(x)
            }
        }
    }

    /// Soft assignment probability of a smoothed linear rule. Errors for
    /// every other rule kind.
    pub fn evaluate_soft(&self, x: &[f64]) -> Result<f64, ModelError> {
        match self {
            TreatmentRule::SmoothedLinear { theta, bandwidth } => {
                if !(bandwidth.is_finite() && *bandwidth > 0.0) {
                    return Err(ModelError::InvalidBandwidth(*bandwidth));
                }
                Ok(normal_cdf(Self::linear_score(theta, x)? / bandwidth))
            }
            _ => Err(ModelError::NotSmoothed),
        }
    }

    /// Probability that this rule assigns arm 1: the soft assignment for
    /// smoothed rules, the hard decision (as 0.0 or 1.0) otherwise.
    pub fn assignment_probability(&self, x: &[f64], index: Option<usize>) -> Result<f64, ModelError> {
        match self {
            TreatmentRule::SmoothedLinear { .. } => self.evaluate_soft(x),
            TreatmentRule::CrossFit { rules, assignment } => {
                let index = index.ok_or(ModelError::IndexRequired)?;
                if index >= assignment.n() {
                    return Err(ModelError::IndexOutOfRange { index, n: assignment.n() });
                }
                rules[assignment.fold_of(index)].assignment_probability(x, None)
            }
            _ => Ok(f64::from(self.evaluate_indexed(x, index)?)),
        }
    }

    /// Probability that the rule's assignment matches the received arm `a`.
    pub fn match_probability(&self, x: &[f64], a: u8, index: Option<usize>) -> Result<f64, ModelError> {
        let p = self.assignment_probability(x, index)?;
        Ok(if a == 1 { p } else { 1.0 - p })
    }

    /// JSON description for audit output.
    pub fn describe(&self) -> serde_json::Value {
        match self {
            TreatmentRule::Static(a) => serde_json::json!({
                "type": "static",
                "treatment": a,
            }),
            TreatmentRule::LinearThreshold(theta) => serde_json::json!({
                "type": "linear_threshold",
                "theta": theta,
            }),
            TreatmentRule::SmoothedLinear { theta, bandwidth } => serde_json::json!({
                "type": "smoothed_linear",
                "theta": theta,
                "bandwidth": bandwidth,
            }),
            TreatmentRule::PlugIn { arm0, arm1 } => serde_json::json!({
                "type": "plug_in",
                "arm0": arm0.describe(),
                "arm1": arm1.describe(),
            }),
            TreatmentRule::CrossFit { rules, assignment } => serde_json::json!({
                "type": "cross_fit",
                "k": assignment.k(),
                "rules": rules.iter().map(|r| r.describe()).collect::<Vec<_>>(),
            }),
        }
    }
}

impl fmt::Debug for TreatmentRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreatmentRule::Static(a) => write!(f, "Static({a})"),
            TreatmentRule::LinearThreshold(theta) => {
                f.debug_tuple("LinearThreshold").field(theta).finish()
            }
            TreatmentRule::SmoothedLinear { theta, bandwidth } => f
                .debug_struct("SmoothedLinear")
                .field("theta", theta)
                .field("bandwidth", bandwidth)
                .finish(),
            TreatmentRule::PlugIn { .. } => write!(f, "PlugIn {{ .. }}"),
            TreatmentRule::CrossFit { rules, .. } => {
                f.debug_struct("CrossFit").field("rules", rules).finish()
            }
        }
    }
}

/// Right-continuous step function for survival probabilities over months.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvivalCurve {
    months: Vec<u32>,
    survival: Vec<f64>,
}

impl StepSurvivalCurve {
    /// `months` must be strictly increasing and at least 1; `survival`
    /// holds the curve's value from each month onward and must be
    /// non-increasing within [0, 1].
    pub fn new(months: Vec<u32>, survival: Vec<f64>) -> Result<Self, ModelError> {
        if months.len() != survival.len() {
            return Err(ModelError::InvalidCurve(format!(
                "{} months vs {} values",
                months.len(),
                survival.len()
            )));
        }
        if months.first().is_some_and(|&m| m < 1) {
            return Err(ModelError::InvalidCurve("months start below 1".into()));
        }
        if months.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidCurve("months not strictly increasing".into()));
        }
        for w in survival.windows(2) {
            if w[1] > w[0] {
                return Err(ModelError::InvalidCurve("survival increases".into()));
            }
        }
        if survival.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(ModelError::InvalidCurve("survival outside [0, 1]".into()));
        }
        Ok(StepSurvivalCurve { months, survival })
    }

    /// Product-limit estimate from coarsened follow-up data.
    pub fn kaplan_meier(zs: &[u32], deltas: &[u8]) -> Result<Self, ModelError> {
        if zs.len() != deltas.len() || zs.is_empty() {
            return Err(ModelError::InvalidCurve("mismatched or empty inputs".into()));
        }
        let max_z = *zs.iter().max().unwrap();
        let mut events = vec![0u32; (max_z + 1) as usize];
        let mut exits = vec![0u32; (max_z + 1) as usize];
        for (&z, &d) in zs.iter().zip(deltas) {
            if !(1..=MAX_MONTH).contains(&z) {
                return Err(ModelError::InvalidMonth(z));
            }
            exits[z as usize] += 1;
            if d == 1 {
                events[z as usize] += 1;
            }
        }
        let mut at_risk = zs.len() as u32;
        let mut surv = 1.0;
        let mut months = Vec::new();
        let mut survival = Vec::new();
        for m in 1..=max_z {
            if events[m as usize] > 0 {
                surv *= 1.0 - f64::from(events[m as usize]) / f64::from(at_risk);
                months.push(m);
                survival.push(surv);
            }
            at_risk -= exits[m as usize];
        }
        if months.is_empty() {
            // No events anywhere: the curve is identically 1.
            return StepSurvivalCurve::new(vec![1], vec![1.0]);
        }
        StepSurvivalCurve::new(months, survival)
    }

    /// Value at time `t` (right-continuous): the probability of surviving
    /// past `t`. Times before the first step return 1.
    pub fn at(&self, t: f64) -> f64 {
        match self.months.iter().rposition(|&m| f64::from(m) <= t) {
            Some(i) => self.survival[i],
            None => 1.0,
        }
    }

    /// Left limit at time `t`: the value just before `t`.
    pub fn before(&self, t: f64) -> f64 {
        match self.months.iter().rposition(|&m| f64::from(m) < t) {
            Some(i) => self.survival[i],
            None => 1.0,
        }
    }

    pub fn months(&self) -> &[u32] {
        &self.months
    }

    pub fn survival(&self) -> &[f64] {
        &self.survival
    }
}

/// A balanced partition of `n` records into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Validates fold ids, that every fold is non-empty, and that fold
    /// sizes differ by at most one.
    pub fn new(fold_of: Vec<usize>, k: usize) -> Result<Self, ModelError> {
        if k < 2 {
            return Err(ModelError::InvalidFolds(format!("k = {k} below 2")));
        }
        if fold_of.len() < k {
            return Err(ModelError::InvalidFolds(format!(
                "{} records cannot fill {k} folds",
                fold_of.len()
            )));
        }
        let mut sizes = vec![0usize; k];
        for &f in &fold_of {
            if f >= k {
                return Err(ModelError::InvalidFolds(format!("fold id {f} out of range")));
            }
            sizes[f] += 1;
        }
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if *min == 0 || max - min > 1 {
            return Err(ModelError::InvalidFolds(format!("unbalanced fold sizes {sizes:?}")));
        }
        Ok(FoldAssignment { k, fold_of })
    }

    /// Draw a uniformly random balanced assignment.
    pub fn random<R: rand::Rng>(n: usize, k: usize, rng: &mut R) -> Result<Self, ModelError> {
        if k < 2 || n < k {
            return Err(ModelError::InvalidFolds(format!("cannot split {n} records into {k} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates, then deal round-robin so sizes differ by <= 1.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut fold_of = vec![0usize; n];
        for (pos, &record) in order.iter().enumerate() {
            fold_of[record] = pos % k;
        }
        FoldAssignment::new(fold_of, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self, index: usize) -> usize {
        self.fold_of[index]
    }

    pub fn fold_ids(&self) -> &[usize] {
        &self.fold_of
    }

    /// Indices held out by fold `fold`.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Indices available for training when fold `fold` is held out.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}
