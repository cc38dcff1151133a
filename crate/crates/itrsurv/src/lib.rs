//! Estimation of individualized treatment rules from right-censored
//! observational survival data.
//!
//! The crate covers the full pipeline:
//!
//! * [`model`]: observed-data records, cohorts, treatment rules, step
//!   survival curves, fold assignments.
//! * [`dgp`]: a configurable cohort simulator with known ground truth, so
//!   estimators can be scored against the rule an oracle would pick.
//! * [`nuisance`]: logistic propensity models and (optionally penalized)
//!   proportional-hazards models for censoring and event times.
//! * [`value`]: inverse-probability-weighted estimators of the probability
//!   of surviving past a horizon when treatment is assigned by a rule.
//! * [`rules`]: rule estimators (outcome-regression plug-in, direct genetic
//!   search, outcome-weighted learning), cross-fitting, and a max-value
//!   ensemble.
//! * [`metrics`]: regret-style performance metrics and summary statistics.
//! * [`harness`]: a replicated simulation-experiment runner with
//!   deterministic seeding, crash resume, and CSV/JSON outputs.
//!
//! # Quick start
//!
//! Simulate a cohort, fit nuisance models, and estimate the value of the
//! always-treat rule:
//!
//! ```
//! use itrsurv::dgp::{CovariateModel, ScenarioSpec, generate_cohort};
//! use itrsurv::model::TreatmentRule;
//! use itrsurv::rules::NuisanceSet;
//! use itrsurv::stream;
//! use itrsurv::value::{IpwWeights, WeightBase, value_ipw_km};
//! use std::sync::Arc;
//!
//! let scenario = ScenarioSpec::builtin(0).unwrap();
//! let model = CovariateModel::default();
//! let mut rng = stream::derive_rng(7, &[stream::DATA]);
//! let generated = generate_cohort(&scenario, &model, 400, &mut rng).unwrap();
//!
//! let nuisances = NuisanceSet::fit(&generated.cohort, false).unwrap();
//! let base = Arc::new(WeightBase::new(
//!     &generated.cohort,
//!     &nuisances.propensity,
//!     &nuisances.censor,
//!     scenario.horizon,
//! ).unwrap());
//! let weights = IpwWeights::for_rule(&base, &generated.cohort, &TreatmentRule::Static(1)).unwrap();
//! let value = value_ipw_km(&weights).unwrap();
//! assert!((0.0..=1.0).contains(&value));
//! ```

pub mod dgp;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nuisance;
pub mod numeric;
pub mod rules;
pub mod stream;
pub mod value;

pub use model::{Cohort, FoldAssignment, ObservedRecord, StepSurvivalCurve, TreatmentRule};
