//! Inverse-probability-weighted value estimation for treatment rules.
//!
//! The value of a rule is the probability of surviving past the decision
//! horizon when every subject is treated according to it. In observational
//! data only records whose received arm agrees with the rule carry
//! information about that counterfactual, and censoring removes follow-up
//! selectively, so each record is reweighted by the inverse of its
//! treatment and censoring probabilities.
//!
//! [`WeightBase`] holds everything that does not depend on the rule:
//! inverse arm probabilities and month-by-month inverse censoring
//! survival. Scoring a candidate rule then only needs its match
//! probabilities ([`IpwWeights::for_rule`]), which keeps the inner loop of
//! direct rule search cheap.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cohort, ModelError, TreatmentRule, MAX_MONTH};
use crate::nuisance::{CoxModel, NuisanceError, PropensityModel};

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("decision horizon must be in [1, {}], got {0}", MAX_MONTH - 1)]
    BadHorizon(u32),
    #[error("every weight is zero: the rule matches no received treatment")]
    NoWeightedMass,
    #[error("normalizer is zero: the rule matches no received treatment")]
    ZeroNormalizer,
    #[error("{what} has {got} rows for {want} records")]
    TableSize { what: &'static str, got: usize, want: usize },
    #[error("row {row} of {what} has {got} entries, need {want}")]
    TableRow { what: &'static str, row: usize, got: usize, want: usize },
    #[error("record {index}: received-arm probability {value} is not in (0, 1]")]
    BadArmProbability { index: usize, value: f64 },
    #[error("record {row}, month {month}: survival value {value} is not in (0, 1]")]
    BadSurvival { row: usize, month: u32, value: f64 },
    #[error("weights were built for horizon {weights}, tables for {tables}")]
    HorizonMismatch { weights: u32, tables: u32 },
    #[error("weight base was built on a different cohort ({0})")]
    CohortMismatch(String),
    #[error("unknown value estimator '{0}' (expected v1, v2, or v3)")]
    UnknownEstimator(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
}

/// Rule-independent weight ingredients for one cohort and horizon.
///
/// For record `i` and month `s` the stored base weight is
/// `1 / (pi_i * P(C >= s | x_i, a_i))` where `pi_i` is the probability of
/// the arm the record actually received. The full inverse-probability
/// weight of a rule is this base times the rule's match probability.
///
/// The at-risk indicator `Y_i(s) = I(Z_i >= s)` is the event
/// `min(T_i, C_i) > s - 1` on the month grid, which is why the base pairs
/// it with the left limit `P(C >= s)`. The survivor indicator
/// `I(Z_i > horizon)` instead certifies `C_i > horizon`, so the separate
/// [`WeightBase::survivor_weight`] divides by `P(C > horizon | x_i, a_i)`.
pub struct WeightBase {
    horizon: u32,
    z: Vec<u32>,
    delta: Vec<u8>,
    a: Vec<u8>,
    /// `1 / pi_i`; the Hajek normalizer sums `match * inverse_arm`.
    inverse_arm: Vec<f64>,
    /// Row-major `n x horizon`: `base[i * horizon + s - 1]` covers month `s`.
    base: Vec<f64>,
    /// `1 / (pi_i * P(C > horizon | x_i, a_i))` per record.
    survivor: Vec<f64>,
    /// Record ids with `z >= s`, one list per month `s = 1..=horizon`.
    at_risk: Vec<Vec<u32>>,
    /// Record ids with `z == s` and `delta == 1`, one list per month.
    events: Vec<Vec<u32>>,
}

impl WeightBase {
    /// Build the weight base from fitted nuisance models. The propensity is
    /// clipped to [0.01, 0.99] and the censoring survival floored at 0.01
    /// by the models themselves, so every base weight is finite.
    pub fn new(
        cohort: &Cohort,
        propensity: &PropensityModel,
        censor: &CoxModel,
        horizon: u32,
    ) -> Result<Self, ValueError> {
        check_horizon(horizon)?;
        let n = cohort.n();
        let mut treat_prob = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for record in cohort.records() {
            treat_prob.push(propensity.probability(&record.x)?);
            let mut row = Vec::with_capacity(horizon as usize + 1);
            for s in 1..=horizon {
                row.push(censor.censor_survival(&record.x, record.a, s)?);
            }
            // P(C > horizon) is the left limit one month later.
            row.push(censor.censor_survival(&record.x, record.a, horizon + 1)?);
            rows.push(row);
        }
        Self::from_probabilities(cohort, &treat_prob, &rows, horizon)
    }

    /// Build the weight base from explicit probabilities instead of fitted
    /// models. `treat_prob[i]` is `P(A = 1 | x_i)`; `censor_survival[i]`
    /// holds `P(C >= s | x_i, a_i)` for `s = 1..=horizon` followed by one
    /// final entry `P(C > horizon | x_i, a_i)`. Values are used as given,
    /// without clipping, so exact weights (for example all ones) can be
    /// represented.
    pub fn from_probabilities(
        cohort: &Cohort,
        treat_prob: &[f64],
        censor_survival: &[Vec<f64>],
        horizon: u32,
    ) -> Result<Self, ValueError> {
        check_horizon(horizon)?;
        let n = cohort.n();
        let months = horizon as usize;
        if treat_prob.len() != n {
            return Err(ValueError::TableSize {
                what: "treatment probability table",
                got: treat_prob.len(),
                want: n,
            });
        }
        if censor_survival.len() != n {
            return Err(ValueError::TableSize {
                what: "censoring survival table",
                got: censor_survival.len(),
                want: n,
            });
        }
        let mut z = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut inverse_arm = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n * months);
        let mut survivor = Vec::with_capacity(n);
        for (i, record) in cohort.records().iter().enumerate() {
            let row = &censor_survival[i];
            if row.len() != months + 1 {
                return Err(ValueError::TableRow {
                    what: "censoring survival table",
                    row: i,
                    got: row.len(),
                    want: months + 1,
                });
            }
            let p1 = treat_prob[i];
            let arm_prob = if record.a == 1 { p1 } else { 1.0 - p1 };
            if !(arm_prob.is_finite() && arm_prob > 0.0 && arm_prob <= 1.0) {
                return Err(ValueError::BadArmProbability { index: i, value: arm_prob });
            }
            for (k, &surv) in row.iter().enumerate() {
                if !(surv.is_finite() && surv > 0.0 && surv <= 1.0) {
                    return Err(ValueError::BadSurvival {
                        row: i,
                        month: k as u32 + 1,
                        value: surv,
                    });
                }
                if k < months {
                    base.push(1.0 / (arm_prob * surv));
                }
            }
            survivor.push(1.0 / (arm_prob * row[months]));
            inverse_arm.push(1.0 / arm_prob);
            z.push(record.z);
            delta.push(record.delta);
            a.push(record.a);
        }
        let mut at_risk = vec![Vec::new(); months];
        let mut events = vec![Vec::new(); months];
        for (i, &zi) in z.iter().enumerate() {
            let last = zi.min(horizon) as usize;
            for list in at_risk.iter_mut().take(last) {
                list.push(i as u32);
            }
            if delta[i] == 1 && zi <= horizon {
                events[zi as usize - 1].push(i as u32);
            }
        }
        Ok(WeightBase { horizon, z, delta, a, inverse_arm, base, survivor, at_risk, events })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    /// Base weight of record `index` in month `s` (match probability not
    /// yet applied). Panics if `index` or `s` is out of range.
    pub fn base_weight(&self, index: usize, s: u32) -> f64 {
        assert!((1..=self.horizon).contains(&s), "month {s} outside 1..={}", self.horizon);
        self.base[index * self.horizon as usize + s as usize - 1]
    }

    /// Weight attached to the survivor indicator `I(Z > horizon)`.
    /// Panics if `index` is out of range.
    pub fn survivor_weight(&self, index: usize) -> f64 {
        self.survivor[index]
    }

    /// Inverse probability of the received arm; the Hajek normalizer term.
    /// Panics if `index` is out of range.
    pub fn inverse_arm_weight(&self, index: usize) -> f64 {
        self.inverse_arm[index]
    }

    pub(crate) fn check_same_cohort(&self, cohort: &Cohort) -> Result<(), ValueError> {
        if cohort.n() != self.n() {
            return Err(ValueError::CohortMismatch(format!(
                "{} records vs {}",
                cohort.n(),
                self.n()
            )));
        }
        for (i, record) in cohort.records().iter().enumerate() {
            if record.z != self.z[i] || record.delta != self.delta[i] || record.a != self.a[i] {
                return Err(ValueError::CohortMismatch(format!("record {i} disagrees")));
            }
        }
        Ok(())
    }
}

/// Inverse-probability weights of one rule on one cohort.
pub struct IpwWeights {
    base: Arc<WeightBase>,
    /// Probability that the rule's assignment matches the received arm;
    /// 0 or 1 for hard rules.
    match_prob: Vec<f64>,
    /// Probability that the rule assigns arm 1; used to blend per-arm
    /// model predictions when augmenting.
    assign_prob: Vec<f64>,
}

impl IpwWeights {
    /// Evaluate a rule's match probabilities against the base's cohort.
    /// Cross-fitted rules are evaluated by record index, so `cohort` must
    /// be the one the base was built on; this is checked.
    pub fn for_rule(
        base: &Arc<WeightBase>,
        cohort: &Cohort,
        rule: &TreatmentRule,
    ) -> Result<Self, ValueError> {
        base.check_same_cohort(cohort)?;
        let n = cohort.n();
        let mut match_prob = Vec::with_capacity(n);
        let mut assign_prob = Vec::with_capacity(n);
        for (i, record) in cohort.records().iter().enumerate() {
            let p1 = rule.assignment_probability(&record.x, Some(i))?;
            assign_prob.push(p1);
            match_prob.push(if record.a == 1 { p1 } else { 1.0 - p1 });
        }
        Ok(IpwWeights { base: Arc::clone(base), match_prob, assign_prob })
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn horizon(&self) -> u32 {
        self.base.horizon()
    }

    pub fn base(&self) -> &Arc<WeightBase> {
        &self.base
    }

    /// Full weight of record `index` in month `s`: match probability times
    /// base weight. Panics if `index` or `s` is out of range.
    pub fn weight_at(&self, index: usize, s: u32) -> f64 {
        self.match_prob[index] * self.base.base_weight(index, s)
    }

    pub fn match_probability(&self, index: usize) -> f64 {
        self.match_prob[index]
    }

    pub fn assignment_probability(&self, index: usize) -> f64 {
        self.assign_prob[index]
    }

    fn no_mass(&self) -> bool {
        self.match_prob.iter().all(|&m| m <= 0.0)
    }
}

/// Convenience wrapper: build the weight base from fitted nuisance models
/// and evaluate one rule. When several rules are scored on the same
/// cohort, build the [`WeightBase`] once and call [`IpwWeights::for_rule`]
/// per rule instead.
pub fn compute_weights(
    cohort: &Cohort,
    rule: &TreatmentRule,
    propensity: &PropensityModel,
    censor: &CoxModel,
    horizon: u32,
) -> Result<IpwWeights, ValueError> {
    let base = Arc::new(WeightBase::new(cohort, propensity, censor, horizon)?);
    IpwWeights::for_rule(&base, cohort, rule)
}

/// Weighted product-limit estimate of survival past the horizon.
///
/// Multiplies `1 - num(s) / den(s)` over months `s = 1..=horizon`, where
/// `num(s)` sums the weights of records with an observed event in month
/// `s` and `den(s)` sums the weights of records still at risk there.
/// Months with zero weighted at-risk mass carry no information and
/// contribute factor 1. Events are a subset of the at-risk set and weights
/// are nonnegative, so the result stays in [0, 1].
///
/// Errors with [`ValueError::NoWeightedMass`] when the rule matches no
/// record at all; the estimate is undefined then and callers report it as
/// missing.
pub fn value_ipw_km(weights: &IpwWeights) -> Result<f64, ValueError> {
    if weights.no_mass() {
        return Err(ValueError::NoWeightedMass);
    }
    let base = &weights.base;
    let months = base.horizon as usize;
    let mut survival = 1.0;
    for s in 0..months {
        let mut den = 0.0;
        for &i in &base.at_risk[s] {
            let i = i as usize;
            den += weights.match_prob[i] * base.base[i * months + s];
        }
        if den <= 0.0 {
            continue;
        }
        let mut num = 0.0;
        for &i in &base.events[s] {
            let i = i as usize;
            num += weights.match_prob[i] * base.base[i * months + s];
        }
        survival *= 1.0 - num / den;
    }
    Ok(survival)
}

/// Horvitz-Thompson estimate: the average over records of
/// `I(Z > horizon)` times the survivor weight. A record with `Z` past the
/// horizon is known alive there no matter how its follow-up later ended,
/// so the indicator reads follow-up rather than the event flag.
///
/// The estimate is nonnegative but not bounded by 1: a heavily weighted
/// survivor can push it past 1 in small samples.
pub fn value_ipw_ht(weights: &IpwWeights) -> f64 {
    let base = &weights.base;
    let mut sum = 0.0;
    for i in 0..base.n() {
        if base.z[i] > base.horizon {
            sum += weights.match_prob[i] * base.survivor[i];
        }
    }
    sum / base.n() as f64
}

/// Hajek variant of [`value_ipw_ht`]: divides by the estimated matched
/// mass `sum(match_i / pi_i)` instead of `n`. The two coincide whenever
/// that sum equals `n`. Errors with [`ValueError::ZeroNormalizer`] when
/// the rule matches no record.
pub fn value_hajek(weights: &IpwWeights) -> Result<f64, ValueError> {
    let base = &weights.base;
    let mut normalizer = 0.0;
    for i in 0..base.n() {
        normalizer += weights.match_prob[i] * base.inverse_arm[i];
    }
    if normalizer <= 0.0 {
        return Err(ValueError::ZeroNormalizer);
    }
    Ok(base.n() as f64 / normalizer * value_ipw_ht(weights))
}

/// Selects one of the three value estimators by its report id: `v1` is
/// the weighted product-limit estimator ([`value_ipw_km`]), `v2` the
/// Horvitz-Thompson mean ([`value_ipw_ht`]), `v3` its Hajek-normalized
/// form ([`value_hajek`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueEstimator {
    #[serde(rename = "v1")]
    IpwKm,
    #[serde(rename = "v2")]
    IpwHt,
    #[serde(rename = "v3")]
    Hajek,
}

impl ValueEstimator {
    pub const ALL: [ValueEstimator; 3] =
        [ValueEstimator::IpwKm, ValueEstimator::IpwHt, ValueEstimator::Hajek];

    pub fn id(self) -> &'static str {
        match self {
            ValueEstimator::IpwKm => "v1",
            ValueEstimator::IpwHt => "v2",
            ValueEstimator::Hajek => "v3",
        }
    }

    pub fn parse(text: &str) -> Option<ValueEstimator> {
        ValueEstimator::ALL.iter().copied().find(|e| e.id() == text)
    }

    pub fn estimate(self, weights: &IpwWeights) -> Result<f64, ValueError> {
        match self {
            ValueEstimator::IpwKm => value_ipw_km(weights),
            ValueEstimator::IpwHt => Ok(value_ipw_ht(weights)),
            ValueEstimator::Hajek => value_hajek(weights),
        }
    }
}

impl fmt::Display for ValueEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ValueEstimator {
    type Err = ValueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ValueEstimator::parse(s).ok_or_else(|| ValueError::UnknownEstimator(s.to_string()))
    }
}

/// Model predictions that complete the weighted sums of
/// [`value_ipw_km_augmented`]: per-arm event survival and discrete hazard
/// for every record and month, plus censoring survival through the
/// horizon under the received arm. The tables depend only on the cohort
/// and the fitted models, so they are built once and reused across rules.
pub struct AugmentationTables {
    horizon: u32,
    /// `event_surv[arm][i * horizon + s - 1] = P(T > s | arm, x_i)`.
    event_surv: [Vec<f64>; 2],
    /// `hazard[arm][i * horizon + s - 1]`: discrete hazard jump at `s`.
    hazard: [Vec<f64>; 2],
    /// `P(C >= horizon | x_i, a_i)` under the received arm.
    censor_horizon: Vec<f64>,
}

impl AugmentationTables {
    pub fn new(
        cohort: &Cohort,
        outcome: &CoxModel,
        censor: &CoxModel,
        horizon: u32,
    ) -> Result<Self, ValueError> {
        check_horizon(horizon)?;
        let n = cohort.n();
        let months = horizon as usize;
        let mut event_surv = [Vec::with_capacity(n * months), Vec::with_capacity(n * months)];
        let mut hazard = [Vec::with_capacity(n * months), Vec::with_capacity(n * months)];
        let mut censor_horizon = Vec::with_capacity(n);
        for record in cohort.records() {
            for arm in 0..2u8 {
                for s in 1..=horizon {
                    event_surv[arm as usize].push(outcome.event_survival(&record.x, arm, s)?);
                    hazard[arm as usize].push(outcome.hazard_increment(&record.x, arm, s)?);
                }
            }
            censor_horizon.push(censor.censor_survival(&record.x, record.a, horizon)?);
        }
        Ok(AugmentationTables { horizon, event_surv, hazard, censor_horizon })
    }

    /// Build tables from explicit values instead of fitted models, for
    /// custom outcome estimates. Layouts match the field documentation;
    /// `censor_horizon` sets the number of records.
    pub fn from_parts(
        event_surv: [Vec<f64>; 2],
        hazard: [Vec<f64>; 2],
        censor_horizon: Vec<f64>,
        horizon: u32,
    ) -> Result<Self, ValueError> {
        check_horizon(horizon)?;
        let want = censor_horizon.len() * horizon as usize;
        for table in event_surv.iter().chain(hazard.iter()) {
            if table.len() != want {
                return Err(ValueError::TableSize {
                    what: "augmentation table",
                    got: table.len(),
                    want,
                });
            }
        }
        Ok(AugmentationTables { horizon, event_surv, hazard, censor_horizon })
    }

    pub fn n(&self) -> usize {
        self.censor_horizon.len()
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }
}

/// Augmented product-limit estimate. Each month's weighted event and
/// at-risk sums are completed with outcome-model predictions: record `i`
/// adds `(1 - w_i(s)) * P(C >= horizon | x_i, a_i) * P(T > s | d(x_i), x_i)`
/// to the at-risk mass, and the same times the discrete hazard
/// `h(s | d(x_i), x_i)` to the event mass. For soft rules the per-arm
/// predictions are blended by the rule's assignment probability. Months
/// whose completed at-risk mass is not positive contribute factor 1.
///
/// With predictions that are identically zero this reduces to
/// [`value_ipw_km`], and with all weights equal to 1 the completion terms
/// vanish and it reduces to the unweighted product-limit estimate. Unlike
/// the plain estimator it stays defined when the rule matches no record:
/// the product is then built from model predictions alone.
pub fn value_ipw_km_augmented(
    weights: &IpwWeights,
    tables: &AugmentationTables,
) -> Result<f64, ValueError> {
    let base = &weights.base;
    if tables.n() != base.n() {
        return Err(ValueError::TableSize {
            what: "augmentation table",
            got: tables.n(),
            want: base.n(),
        });
    }
    if tables.horizon != base.horizon {
        return Err(ValueError::HorizonMismatch {
            weights: base.horizon,
            tables: tables.horizon,
        });
    }
    let months = base.horizon as usize;
    let mut survival = 1.0;
    for s in 0..months {
        let month = s as u32 + 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..base.n() {
            let offset = i * months + s;
            let w = weights.match_prob[i] * base.base[offset];
            let p1 = weights.assign_prob[i];
            let surv1 = tables.event_surv[1][offset];
            let surv0 = tables.event_surv[0][offset];
            let blended_surv = p1 * surv1 + (1.0 - p1) * surv0;
            let blended_rate =
                p1 * surv1 * tables.hazard[1][offset] + (1.0 - p1) * surv0 * tables.hazard[0][offset];
            let completion = (1.0 - w) * tables.censor_horizon[i];
            if base.z[i] == month && base.delta[i] == 1 {
                num += w;
            }
            num += completion * blended_rate;
            if base.z[i] >= month {
                den += w;
            }
            den += completion * blended_surv;
        }
        if den > 0.0 {
            survival *= 1.0 - num / den;
        }
    }
    Ok(survival)
}

fn check_horizon(horizon: u32) -> Result<(), ValueError> {
    // P(C > horizon) reads the censoring model one month past the horizon,
    // so the horizon must stop short of the last representable month.
    if horizon == 0 || horizon >= MAX_MONTH {
        return Err(ValueError::BadHorizon(horizon));
    }
    Ok(())
}
