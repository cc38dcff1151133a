//! Scores an estimated treatment rule against the generating process:
//! value-estimator error at the oracle rule, true regret of the estimated
//! rule, the gap between the apparent value and the truth, and covariate
//! misclassification.
//!
//! Three signed metrics decompose where an estimator goes wrong. Writing
//! `V(d)` for the true value of rule `d`, `V^(d)` for its estimate from
//! the cohort, `d_opt` for the oracle rule, and `d^` for the estimated
//! rule:
//!
//! * [`metric_i`] `= V^(d_opt) - V(d_opt)` isolates value-estimation error
//!   at a fixed, known rule.
//! * [`metric_ii`] `= V(d^) - V(d_opt)` is the negated regret of the
//!   estimated rule; it is nonpositive up to Monte Carlo error in the
//!   oracle values.
//! * [`metric_iii`] `= V^(d^) - V(d_opt)` compares the number a real study
//!   would report against the best achievable truth, compounding both
//!   error sources. A positive mean is over-optimism.
//!
//! True values come from the generating process over fresh covariate
//! draws ([`crate::dgp::oracle_value_on`]); one draw set per scenario is
//! shared across every method in a replication so comparisons are paired.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cohort, ModelError, TreatmentRule};
use crate::rules::FitMode;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("rule evaluation failed: {0}")]
    Rule(#[from] ModelError),
}

/// Value-estimation error at the oracle rule: `v_hat_dopt - v_true_dopt`.
///
/// Variation here comes only from estimating the value, not the rule.
pub fn metric_i(v_hat_dopt: f64, v_true_dopt: f64) -> f64 {
    v_hat_dopt - v_true_dopt
}

/// True value of the estimated rule minus the true optimum:
/// `v_true_dhat - v_true_dopt`, the negated regret of `d^`.
///
/// Nonpositive by optimality of the oracle rule, up to Monte Carlo error
/// in the oracle values; callers should compute those from at least 10^5
/// draws for that slack to be negligible.
pub fn metric_ii(v_true_dhat: f64, v_true_dopt: f64) -> f64 {
    v_true_dhat - v_true_dopt
}

/// Apparent value of the estimated rule minus the true optimum:
/// `v_hat_dhat - v_true_dopt`.
///
/// This is the gap between the number a study would report for its fitted
/// rule and the best truly achievable value. It decomposes as the
/// value-estimation error at `d^` plus [`metric_ii`].
pub fn metric_iii(v_hat_dhat: f64, v_true_dopt: f64) -> f64 {
    v_hat_dhat - v_true_dopt
}

/// Fraction of cohort records where `rule` and `oracle_rule` disagree.
///
/// Cross-fitted rules are evaluated through their fold map, so each
/// record is judged by the member that did not train on it.
pub fn misclassification(
    rule: &TreatmentRule,
    oracle_rule: &TreatmentRule,
    cohort: &Cohort,
) -> Result<f64, MetricsError> {
    let mut wrong = 0usize;
    for (i, record) in cohort.records().iter().enumerate() {
        if rule.evaluate_indexed(&record.x, Some(i))? != oracle_rule.evaluate(&record.x)? {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / cohort.n() as f64)
}

/// The four value quantities a replication produces for one method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueSet {
    /// Estimated value of the oracle rule on the cohort.
    pub v_hat_dopt: f64,
    /// Estimated value of the fitted rule on the cohort.
    pub v_hat_dhat: f64,
    /// True value of the fitted rule under the generating process.
    pub v_true_dhat: f64,
    /// True value of the oracle rule under the generating process.
    pub v_true_dopt: f64,
}

/// One scored (scenario, replication, method, mode) cell.
///
/// Serializes to one CSV row with the columns of [`CSV_COLUMNS`], in that
/// order. A method that fails inside a replication produces no row at
/// all; the experiment harness records the failure as a diagnostic
/// instead of writing a partial row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    /// Scenario id the cohort was generated from.
    pub scenario: u8,
    /// Replication index within the experiment.
    pub rep: u64,
    /// Method id, e.g. `cox_lasso` or `max_ensemble`.
    pub method: String,
    /// Whole-sample or cross-fitted estimation.
    pub mode: FitMode,
    pub v_hat_dopt: f64,
    pub v_hat_dhat: f64,
    pub v_true_dhat: f64,
    pub v_true_dopt: f64,
    pub metric_i: f64,
    pub metric_ii: f64,
    pub metric_iii: f64,
    pub misclassification: f64,
}

/// Column order of the per-replication CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "rep",
    "method",
    "mode",
    "v_hat_dopt",
    "v_hat_dhat",
    "v_true_dhat",
    "v_true_dopt",
    "metric_i",
    "metric_ii",
    "metric_iii",
    "misclassification",
];

impl ReplicationMetrics {
    /// Assembles a row, deriving the three metrics from the value set.
    pub fn assemble(
        scenario: u8,
        rep: u64,
        method: &str,
        mode: FitMode,
        values: ValueSet,
        misclassification: f64,
    ) -> Self {
        ReplicationMetrics {
            scenario,
            rep,
            method: method.to_string(),
            mode,
            v_hat_dopt: values.v_hat_dopt,
            v_hat_dhat: values.v_hat_dhat,
            v_true_dhat: values.v_true_dhat,
            v_true_dopt: values.v_true_dopt,
            metric_i: metric_i(values.v_hat_dopt, values.v_true_dopt),
            metric_ii: metric_ii(values.v_true_dhat, values.v_true_dopt),
            metric_iii: metric_iii(values.v_hat_dhat, values.v_true_dopt),
            misclassification,
        }
    }
}
