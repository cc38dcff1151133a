//! Nuisance models behind the value estimators: a logistic propensity model
//! and proportional-hazards models for the censoring and event processes.
//!
//! Event and censoring times live on the integer month grid produced by
//! [`crate::dgp::coarsen`], so ties are heavy; the partial likelihood uses
//! the Breslow tie convention throughout, and the baseline hazard is the
//! matching Breslow step function. Penalized fits (lasso, ridge, elastic
//! net) run cyclic coordinate descent on the usual quadratic approximation
//! with warm starts along a decreasing penalty path.

use crate::model::{Cohort, FoldAssignment, ModelError, MAX_MONTH};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clip for estimated probabilities that end up in inverse-probability
/// denominators: propensities are clipped to `[0.01, 0.99]` and censoring
/// survival probabilities floored at `0.01`.
pub const PROBABILITY_FLOOR: f64 = 0.01;

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_CAP: usize = 100;
const OUTER_TOL: f64 = 1e-5;
const OUTER_CAP: usize = 60;
const INNER_TOL: f64 = 1e-6;
const INNER_CAP: usize = 500;

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("treatment arm {0} has no subjects; the propensity fit needs both arms")]
    OneArm(u8),
    #[error("no events in the fit data")]
    NoEvents,
    #[error("lengths differ: {times} times, {events} event flags, {rows} design rows")]
    LengthMismatch { times: usize, events: usize, rows: usize },
    #[error("time {0} at record {1} is outside the month grid 1..={MAX_MONTH}")]
    BadTime(u32, usize),
    #[error("event flag {0} at record {1} is not 0 or 1")]
    BadFlag(u8, usize),
    #[error("treatment arm must be 0 or 1, got {0}")]
    InvalidArm(u8),
    #[error("month {0} is outside the prediction grid 0..={MAX_MONTH}")]
    MonthOutOfRange(u32),
    #[error("invalid penalty: {0}")]
    BadPenalty(String),
    #[error("penalty factors: {0}")]
    BadPenaltyFactors(String),
    #[error("covariate vector has {got} entries, the model expects {want}")]
    CovariateWidth { got: usize, want: usize },
    #[error("normal-equations solve failed in the logistic fit")]
    Singular,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `exp` with the argument capped below the overflow threshold, so risk-set
/// sums stay finite even if a linear predictor spikes during iteration.
fn safe_exp(eta: f64) -> f64 {
    eta.min(700.0).exp()
}

// ---------------------------------------------------------------------------
// Design matrices
// ---------------------------------------------------------------------------

/// Which columns a proportional-hazards design carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignKind {
    /// Covariates only; used where treatment must not enter.
    CovariatesOnly,
    /// Covariates plus the treatment indicator.
    MainEffects,
    /// Covariates, treatment, and treatment-by-covariate products, in that
    /// order; the layout rule estimators use to model effect heterogeneity.
    WithInteractions,
}

impl DesignKind {
    fn width(self, p: usize) -> usize {
        match self {
            DesignKind::CovariatesOnly => p,
            DesignKind::MainEffects => p + 1,
            DesignKind::WithInteractions => 2 * p + 1,
        }
    }

    fn fill_features(self, x: &[f64], a: u8, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        if self != DesignKind::CovariatesOnly {
            out.push(f64::from(a));
        }
        if self == DesignKind::WithInteractions {
            let a = f64::from(a);
            for &v in x {
                out.push(a * v);
            }
        }
    }
}

/// A column-major design matrix built from a cohort.
#[derive(Debug, Clone)]
pub struct Design {
    kind: DesignKind,
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl Design {
    pub fn from_cohort(cohort: &Cohort, kind: DesignKind) -> Design {
        let n = cohort.n();
        let p = cohort.p();
        let width = kind.width(p);
        let mut cols = vec![Vec::with_capacity(n); width];
        let mut feats = Vec::with_capacity(width);
        for rec in cohort.records() {
            kind.fill_features(&rec.x, rec.a, &mut feats);
            for (col, &v) in cols.iter_mut().zip(feats.iter()) {
                col.push(v);
            }
        }
        let mut names: Vec<String> = cohort.covariate_names().to_vec();
        if kind != DesignKind::CovariatesOnly {
            names.push("a".to_string());
        }
        if kind == DesignKind::WithInteractions {
            for name in cohort.covariate_names() {
                names.push(format!("a:{name}"));
            }
        }
        Design { kind, names, cols, n }
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of columns.
    pub fn p(&self) -> usize {
        self.cols.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

// ---------------------------------------------------------------------------
// Propensity model
// ---------------------------------------------------------------------------

/// Convergence record for an iterative fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute score component at the returned solution.
    pub max_score: f64,
    /// Set when coefficients diverged far enough that the data look
    /// separated; the returned fit is still the likelihood's sup direction.
    pub separation: bool,
}

/// Logistic regression of treatment on covariates, used as the propensity
/// model. Predictions are clipped to `[0.01, 0.99]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    coefficients: Vec<f64>,
    diagnostics: FitDiagnostics,
}

impl PropensityModel {
    /// Intercept followed by one slope per covariate.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    /// Clipped estimate of P(A = 1 | x).
    pub fn probability(&self, x: &[f64]) -> Result<f64, NuisanceError> {
        let want = self.coefficients.len() - 1;
        if x.len() != want {
            return Err(NuisanceError::CovariateWidth { got: x.len(), want });
        }
        let eta = self.coefficients[0]
            + x.iter().zip(&self.coefficients[1..]).map(|(v, b)| v * b).sum::<f64>();
        let p = crate::numeric::inv_logit(eta);
        Ok(p.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR))
    }

    /// Clipped estimate of P(A = a | x).
    pub fn arm_probability(&self, x: &[f64], a: u8) -> Result<f64, NuisanceError> {
        if a > 1 {
            return Err(NuisanceError::InvalidArm(a));
        }
        let p = self.probability(x)?;
        Ok(if a == 1 { p } else { 1.0 - p })
    }
}

/// Fits the propensity model by Newton iterations on the Bernoulli
/// log-likelihood of A on (1, X), with step halving; converged when every
/// per-record (mean-scaled) score component is below 1e-8 in magnitude.
/// Perfectly separated data return the capped fit with a diagnostic rather
/// than an error.
pub fn fit_logistic(cohort: &Cohort) -> Result<PropensityModel, NuisanceError> {
    let n = cohort.n();
    let treated = cohort.records().iter().filter(|r| r.a == 1).count();
    if treated == 0 {
        return Err(NuisanceError::OneArm(1));
    }
    if treated == n {
        return Err(NuisanceError::OneArm(0));
    }

    let p = cohort.p();
    let width = p + 1;
    let mut beta = DVector::<f64>::zeros(width);
    let mut eta = vec![0.0; n];
    let recompute_eta = |beta: &DVector<f64>, eta: &mut Vec<f64>| {
        for (ei, rec) in eta.iter_mut().zip(cohort.records()) {
            *ei = beta[0]
                + rec.x.iter().zip(beta.iter().skip(1)).map(|(v, b)| v * b).sum::<f64>();
        }
    };
    let loglik = |eta: &[f64]| {
        eta.iter()
            .zip(cohort.records())
            .map(|(&e, rec)| f64::from(rec.a) * e - ln_one_plus_exp(e))
            .sum::<f64>()
    };

    let mut converged = false;
    let mut iterations = 0;
    let mut max_score = f64::INFINITY;
    for iter in 1..=NEWTON_CAP {
        iterations = iter;
        let mut score = DVector::<f64>::zeros(width);
        let mut hessian = DMatrix::<f64>::zeros(width, width);
        let mut feat = vec![0.0; width];
        for (rec, &e) in cohort.records().iter().zip(eta.iter()) {
            let prob = crate::numeric::inv_logit(e);
            let resid = f64::from(rec.a) - prob;
            let w = prob * (1.0 - prob);
            feat[0] = 1.0;
            feat[1..].copy_from_slice(&rec.x);
            for j in 0..width {
                score[j] += resid * feat[j];
                for k in j..width {
                    hessian[(j, k)] += w * feat[j] * feat[k];
                }
            }
        }
        for j in 0..width {
            for k in 0..j {
                hessian[(j, k)] = hessian[(k, j)];
            }
        }
        max_score = score.amax() / n as f64;
        if max_score < NEWTON_TOL {
            converged = true;
            break;
        }
        let direction = match Cholesky::new(hessian.clone()) {
            Some(ch) => ch.solve(&score),
            None => {
                let ridge = 1e-8 * (hessian.trace() / width as f64).max(1.0);
                let mut damped = hessian;
                for j in 0..width {
                    damped[(j, j)] += ridge;
                }
                Cholesky::new(damped).ok_or(NuisanceError::Singular)?.solve(&score)
            }
        };
        let ll_old = loglik(&eta);
        // Near the optimum the quadratic gain shrinks below the rounding
        // noise of the summed log-likelihood; accept within that noise.
        let slack = 1e-12 * (1.0 + ll_old.abs());
        let mut step = 1.0;
        loop {
            let candidate = &beta + step * &direction;
            recompute_eta(&candidate, &mut eta);
            if loglik(&eta) >= ll_old - slack || step < 1e-10 {
                beta = candidate;
                break;
            }
            step *= 0.5;
        }
    }

    let separation = beta.amax() > 15.0;
    Ok(PropensityModel {
        coefficients: beta.iter().copied().collect(),
        diagnostics: FitDiagnostics { converged, iterations, max_score, separation },
    })
}

/// `ln(1 + e^x)` without overflow for large `x`.
fn ln_one_plus_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Proportional-hazards model
// ---------------------------------------------------------------------------

/// Elastic-net penalty `lambda * ((1 - mixing) ||b||^2 / 2 + mixing ||b||_1)`
/// subtracted from the partial log-likelihood; `mixing` 1 is the lasso,
/// 0 the ridge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub mixing: f64,
}

impl PenaltySpec {
    pub fn lasso(lambda: f64) -> PenaltySpec {
        PenaltySpec { lambda, mixing: 1.0 }
    }

    pub fn ridge(lambda: f64) -> PenaltySpec {
        PenaltySpec { lambda, mixing: 0.0 }
    }

    pub fn elastic_net(lambda: f64, mixing: f64) -> PenaltySpec {
        PenaltySpec { lambda, mixing }
    }

    fn validate(&self) -> Result<(), NuisanceError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(NuisanceError::BadPenalty(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !self.mixing.is_finite() || !(0.0..=1.0).contains(&self.mixing) {
            return Err(NuisanceError::BadPenalty(format!(
                "mixing must lie in [0, 1], got {}",
                self.mixing
            )));
        }
        Ok(())
    }
}

/// A fitted proportional-hazards model with its Breslow cumulative baseline
/// hazard on the month grid. Coefficients are on the original covariate
/// scale regardless of any internal standardization during a penalized fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoxModel {
    kind: DesignKind,
    names: Vec<String>,
    coefficients: Vec<f64>,
    /// `cum_hazard[s]` is the cumulative baseline hazard through month `s`,
    /// for `s` in `0..=61`; non-negative and non-decreasing.
    cum_hazard: Vec<f64>,
    penalty: Option<PenaltySpec>,
    converged: bool,
    iterations: usize,
}

impl CoxModel {
    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn penalty(&self) -> Option<PenaltySpec> {
        self.penalty
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn covariate_width(&self) -> usize {
        match self.kind {
            DesignKind::CovariatesOnly => self.coefficients.len(),
            DesignKind::MainEffects => self.coefficients.len() - 1,
            DesignKind::WithInteractions => (self.coefficients.len() - 1) / 2,
        }
    }

    pub fn linear_predictor(&self, x: &[f64], a: u8) -> Result<f64, NuisanceError> {
        if a > 1 {
            return Err(NuisanceError::InvalidArm(a));
        }
        let want = self.covariate_width();
        if x.len() != want {
            return Err(NuisanceError::CovariateWidth { got: x.len(), want });
        }
        let b = &self.coefficients;
        let mut eta: f64 = x.iter().zip(b.iter()).map(|(v, c)| v * c).sum();
        if self.kind != DesignKind::CovariatesOnly && a == 1 {
            eta += b[want];
            if self.kind == DesignKind::WithInteractions {
                eta += x.iter().zip(b[want + 1..].iter()).map(|(v, c)| v * c).sum::<f64>();
            }
        }
        Ok(eta)
    }

    /// Cumulative baseline hazard through month `s`.
    pub fn cum_hazard_at(&self, s: u32) -> Result<f64, NuisanceError> {
        if s > MAX_MONTH {
            return Err(NuisanceError::MonthOutOfRange(s));
        }
        Ok(self.cum_hazard[s as usize])
    }

    /// Left limit of the cumulative baseline hazard at month `s`: jumps sit
    /// on integer months, so this is the value through `s - 1`.
    fn cum_hazard_before(&self, s: u32) -> f64 {
        if s == 0 {
            0.0
        } else {
            self.cum_hazard[s as usize - 1]
        }
    }

    /// P(C >= s | x, a), floored at 0.01. Left-continuous: the jump at `s`
    /// itself does not count against being at risk at `s`.
    pub fn censor_survival(&self, x: &[f64], a: u8, s: u32) -> Result<f64, NuisanceError> {
        if s > MAX_MONTH {
            return Err(NuisanceError::MonthOutOfRange(s));
        }
        let eta = self.linear_predictor(x, a)?;
        let surv = (-self.cum_hazard_before(s) * safe_exp(eta)).exp();
        Ok(surv.max(PROBABILITY_FLOOR))
    }

    /// P(T > s | x, a); right-continuous, so the jump at `s` counts.
    pub fn event_survival(&self, x: &[f64], a: u8, s: u32) -> Result<f64, NuisanceError> {
        let eta = self.linear_predictor(x, a)?;
        Ok((-self.cum_hazard_at(s)? * safe_exp(eta)).exp())
    }

    /// Discrete hazard jump at month `s`: the Breslow baseline increment
    /// times `exp` of the linear predictor. Zero at months with no events
    /// in the fit data.
    pub fn hazard_increment(&self, x: &[f64], a: u8, s: u32) -> Result<f64, NuisanceError> {
        if s == 0 || s > MAX_MONTH {
            return Err(NuisanceError::MonthOutOfRange(s));
        }
        let eta = self.linear_predictor(x, a)?;
        let jump = self.cum_hazard[s as usize] - self.cum_hazard[s as usize - 1];
        Ok(jump * safe_exp(eta))
    }
}

/// Breslow-tie partial log-likelihood at the given linear predictors.
pub fn partial_loglik(times: &[u32], events: &[u8], eta: &[f64]) -> f64 {
    let mut risk_sum = [0.0f64; MAX_MONTH as usize + 2];
    let mut deaths = [0u32; MAX_MONTH as usize + 1];
    let mut ll = 0.0;
    for ((&z, &d), &e) in times.iter().zip(events).zip(eta) {
        risk_sum[z as usize] += safe_exp(e);
        if d == 1 {
            deaths[z as usize] += 1;
            ll += e;
        }
    }
    for s in (1..=MAX_MONTH as usize).rev() {
        risk_sum[s] += risk_sum[s + 1];
    }
    for s in 1..=MAX_MONTH as usize {
        if deaths[s] > 0 {
            ll -= f64::from(deaths[s]) * risk_sum[s].ln();
        }
    }
    ll
}

/// Per-record score and curvature of the Breslow partial likelihood with
/// respect to the linear predictor, at the current `eta`.
fn breslow_derivatives(
    times: &[u32],
    events: &[u8],
    eta: &[f64],
    u: &mut [f64],
    w: &mut [f64],
) {
    let top = MAX_MONTH as usize;
    let mut risk_sum = [0.0f64; MAX_MONTH as usize + 2];
    let mut deaths = [0u32; MAX_MONTH as usize + 1];
    for ((&z, &d), &e) in times.iter().zip(events).zip(eta) {
        risk_sum[z as usize] += safe_exp(e);
        if d == 1 {
            deaths[z as usize] += 1;
        }
    }
    for s in (1..=top).rev() {
        risk_sum[s] += risk_sum[s + 1];
    }
    // Prefix sums of d_s / S0(s) and d_s / S0(s)^2 over event months.
    let mut cum_b = [0.0f64; MAX_MONTH as usize + 1];
    let mut cum_b2 = [0.0f64; MAX_MONTH as usize + 1];
    for s in 1..=top {
        cum_b[s] = cum_b[s - 1];
        cum_b2[s] = cum_b2[s - 1];
        if deaths[s] > 0 {
            let d = f64::from(deaths[s]);
            cum_b[s] += d / risk_sum[s];
            cum_b2[s] += d / (risk_sum[s] * risk_sum[s]);
        }
    }
    for (i, ((&z, &d), &e)) in times.iter().zip(events).zip(eta).enumerate() {
        let r = safe_exp(e);
        let b = cum_b[z as usize];
        let b2 = cum_b2[z as usize];
        u[i] = f64::from(d) - r * b;
        w[i] = (r * b - r * r * b2).max(0.0);
    }
}

fn validate_survival_inputs(
    times: &[u32],
    events: &[u8],
    design: &Design,
) -> Result<(), NuisanceError> {
    if times.len() != events.len() || times.len() != design.n() {
        return Err(NuisanceError::LengthMismatch {
            times: times.len(),
            events: events.len(),
            rows: design.n(),
        });
    }
    for (i, (&z, &d)) in times.iter().zip(events).enumerate() {
        if z == 0 || z > MAX_MONTH {
            return Err(NuisanceError::BadTime(z, i));
        }
        if d > 1 {
            return Err(NuisanceError::BadFlag(d, i));
        }
    }
    if !events.contains(&1) {
        return Err(NuisanceError::NoEvents);
    }
    Ok(())
}

/// Column standard deviations for internal standardization. Constant
/// columns get unit scale and are barred from entering the model.
struct Standardization {
    scale: Vec<f64>,
    usable: Vec<bool>,
}

fn standardize(design: &Design) -> (Vec<Vec<f64>>, Standardization) {
    let n = design.n as f64;
    let mut cols = Vec::with_capacity(design.cols.len());
    let mut scale = Vec::with_capacity(design.cols.len());
    let mut usable = Vec::with_capacity(design.cols.len());
    for col in &design.cols {
        let mu = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        let ok = sd > 1e-12;
        let s = if ok { sd } else { 1.0 };
        cols.push(col.iter().map(|v| (v - mu) / s).collect());
        scale.push(s);
        usable.push(ok);
    }
    (cols, Standardization { scale, usable })
}

/// One elastic-net coordinate-descent solve of the penalized weighted
/// quadratic approximation, in covariance form: `gram` is the weighted
/// Gram matrix XᵀWX (row-major, p×p) and `q` the loss gradient at the
/// current `beta`, both on the standardized scale, so each coordinate
/// update costs O(p) regardless of the cohort size.
fn coordinate_descent(
    gram: &[f64],
    q: &mut [f64],
    usable: &[bool],
    l1: &[f64],
    l2: &[f64],
    beta: &mut [f64],
) {
    let p = beta.len();
    for _ in 0..INNER_CAP {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if !usable[j] {
                continue;
            }
            let gjj = gram[j * p + j];
            let den = gjj + l2[j];
            if den <= 0.0 {
                continue;
            }
            let num = q[j] + beta[j] * gjj;
            let new = soft_threshold(num, l1[j]) / den;
            let delta = new - beta[j];
            if delta != 0.0 {
                beta[j] = new;
                for (k, qk) in q.iter_mut().enumerate() {
                    *qk -= delta * gram[k * p + j];
                }
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < INNER_TOL {
            break;
        }
    }
}

/// Weighted Gram matrix of the usable columns, row-major.
fn weighted_gram(cols: &[Vec<f64>], usable: &[bool], w: &[f64], gram: &mut [f64]) {
    let p = cols.len();
    gram.fill(0.0);
    let mut wx = vec![0.0; w.len()];
    for j in 0..p {
        if !usable[j] {
            continue;
        }
        for (wi, (xi, wxi)) in w.iter().zip(cols[j].iter().zip(wx.iter_mut())) {
            *wxi = wi * xi;
        }
        for k in j..p {
            if !usable[k] {
                continue;
            }
            let g: f64 = wx.iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            gram[j * p + k] = g;
            gram[k * p + j] = g;
        }
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Core fitter shared by the public entry points: outer IRLS on the Breslow
/// partial likelihood, inner coordinate descent, on pre-standardized
/// columns. `beta` carries the warm start in and the solution out, on the
/// standardized scale. Returns (converged, iterations).
#[allow(clippy::too_many_arguments)]
fn fit_cox_core(
    times: &[u32],
    events: &[u8],
    cols: &[Vec<f64>],
    usable: &[bool],
    l1: &[f64],
    l2: &[f64],
    beta: &mut [f64],
) -> (bool, usize) {
    let n = times.len();
    let p = cols.len();
    let mut eta = vec![0.0; n];
    for j in 0..p {
        if beta[j] != 0.0 {
            for i in 0..n {
                eta[i] += cols[j][i] * beta[j];
            }
        }
    }
    let penalty = |b: &[f64]| -> f64 {
        (0..p).map(|j| l2[j] * b[j] * b[j] / 2.0 + l1[j] * b[j].abs()).sum()
    };
    let objective = |eta: &[f64], b: &[f64]| partial_loglik(times, events, eta) - penalty(b);

    let mut u = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut q = vec![0.0; p];
    let mut gram = vec![0.0; p * p];
    let mut converged = false;
    let mut iterations = 0;
    let mut best = objective(&eta, beta);
    for iter in 1..=OUTER_CAP {
        iterations = iter;
        breslow_derivatives(times, events, &eta, &mut u, &mut w);
        weighted_gram(cols, usable, &w, &mut gram);
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = if usable[j] {
                cols[j].iter().zip(&u).map(|(x, ui)| x * ui).sum()
            } else {
                0.0
            };
        }
        let beta_old = beta.to_vec();
        let eta_old = eta.clone();
        coordinate_descent(&gram, &mut q, usable, l1, l2, beta);
        for j in 0..p {
            let delta = beta[j] - beta_old[j];
            if delta != 0.0 {
                for (ei, xi) in eta.iter_mut().zip(&cols[j]) {
                    *ei += xi * delta;
                }
            }
        }
        let mut max_change =
            beta.iter().zip(&beta_old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Step halving if the quadratic approximation overshot.
        let mut obj = objective(&eta, beta);
        let mut halvings = 0;
        while obj < best - 1e-9 * (1.0 + best.abs()) && halvings < 10 {
            for j in 0..p {
                beta[j] = 0.5 * (beta[j] + beta_old[j]);
            }
            for i in 0..n {
                eta[i] = 0.5 * (eta[i] + eta_old[i]);
            }
            obj = objective(&eta, beta);
            halvings += 1;
            max_change *= 0.5;
        }
        let gain = obj - best;
        best = best.max(obj);
        if max_change < OUTER_TOL || gain.abs() < 1e-7 * (1.0 + best.abs()) {
            converged = true;
            break;
        }
    }
    (converged, iterations)
}

/// Breslow cumulative baseline hazard at the fitted linear predictors,
/// densely over months `0..=61`.
fn breslow_baseline(times: &[u32], events: &[u8], eta: &[f64]) -> Vec<f64> {
    let top = MAX_MONTH as usize;
    let mut risk_sum = vec![0.0f64; top + 2];
    let mut deaths = vec![0u32; top + 1];
    for ((&z, &d), &e) in times.iter().zip(events).zip(eta) {
        risk_sum[z as usize] += safe_exp(e);
        if d == 1 {
            deaths[z as usize] += 1;
        }
    }
    for s in (1..=top).rev() {
        risk_sum[s] += risk_sum[s + 1];
    }
    let mut cum = vec![0.0f64; top + 1];
    for s in 1..=top {
        cum[s] = cum[s - 1];
        if deaths[s] > 0 {
            cum[s] += f64::from(deaths[s]) / risk_sum[s];
        }
    }
    cum
}

fn expand_penalty_factors(
    factors: Option<&[f64]>,
    p: usize,
) -> Result<Vec<f64>, NuisanceError> {
    match factors {
        None => Ok(vec![1.0; p]),
        Some(f) => {
            if f.len() != p {
                return Err(NuisanceError::BadPenaltyFactors(format!(
                    "{} factors for {} columns",
                    f.len(),
                    p
                )));
            }
            if let Some(bad) = f.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(NuisanceError::BadPenaltyFactors(format!(
                    "factors must be finite and non-negative, got {bad}"
                )));
            }
            Ok(f.to_vec())
        }
    }
}

/// Fits a proportional-hazards model with Breslow ties and an optional
/// elastic-net penalty. `penalty_factors` rescale the penalty per column
/// (0 leaves a column unpenalized); `None` penalizes all columns equally.
pub fn fit_cox(
    times: &[u32],
    events: &[u8],
    design: &Design,
    penalty: Option<PenaltySpec>,
    penalty_factors: Option<&[f64]>,
) -> Result<CoxModel, NuisanceError> {
    validate_survival_inputs(times, events, design)?;
    if let Some(spec) = &penalty {
        spec.validate()?;
    }
    let p = design.p();
    let pf = expand_penalty_factors(penalty_factors, p)?;
    let (cols, std) = standardize(design);
    let (lambda, mixing) = match penalty {
        Some(s) => (s.lambda, s.mixing),
        None => (0.0, 1.0),
    };
    let l1: Vec<f64> = pf.iter().map(|f| lambda * mixing * f).collect();
    let l2: Vec<f64> = pf.iter().map(|f| lambda * (1.0 - mixing) * f).collect();

    let mut beta_std = vec![0.0; p];
    let (converged, iterations) =
        fit_cox_core(times, events, &cols, &std.usable, &l1, &l2, &mut beta_std);
    Ok(finish_cox_model(
        times, events, design, &std, &beta_std, penalty, converged, iterations,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish_cox_model(
    times: &[u32],
    events: &[u8],
    design: &Design,
    std: &Standardization,
    beta_std: &[f64],
    penalty: Option<PenaltySpec>,
    converged: bool,
    iterations: usize,
) -> CoxModel {
    let p = design.p();
    let coefficients: Vec<f64> = (0..p).map(|j| beta_std[j] / std.scale[j]).collect();
    let mut eta_raw = vec![0.0; design.n()];
    for j in 0..p {
        if coefficients[j] != 0.0 {
            let col = &design.cols[j];
            for i in 0..design.n() {
                eta_raw[i] += col[i] * coefficients[j];
            }
        }
    }
    let cum_hazard = breslow_baseline(times, events, &eta_raw);
    CoxModel {
        kind: design.kind(),
        names: design.names().to_vec(),
        coefficients,
        cum_hazard,
        penalty,
        converged,
        iterations,
    }
}

/// Cross-validation record: the penalty grid, the validated partial
/// log-likelihood per grid point, and the chosen index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub lambdas: Vec<f64>,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// Log-spaced penalty grid from the smallest value that zeroes every
/// penalized coefficient down three decades, 25 points.
fn lambda_grid(
    times: &[u32],
    events: &[u8],
    cols: &[Vec<f64>],
    usable: &[bool],
    mixing: f64,
    pf: &[f64],
) -> Vec<f64> {
    let n = times.len();
    let mut u = vec![0.0; n];
    let mut w = vec![0.0; n];
    let eta0 = vec![0.0; n];
    breslow_derivatives(times, events, &eta0, &mut u, &mut w);
    let denom = mixing.max(0.001);
    let mut lambda_max = 0.0f64;
    for (j, col) in cols.iter().enumerate() {
        if !usable[j] || pf[j] <= 0.0 {
            continue;
        }
        let grad: f64 = col.iter().zip(&u).map(|(x, ui)| x * ui).sum();
        lambda_max = lambda_max.max(grad.abs() / (denom * pf[j]));
    }
    if lambda_max <= 0.0 {
        lambda_max = 1.0;
    }
    let points = 25usize;
    let ratio = 1e-3f64;
    (0..points)
        .map(|l| lambda_max * ratio.powf(l as f64 / (points - 1) as f64))
        .collect()
}

/// Fits a warm-started path over `lambdas` (descending) and returns the
/// standardized-scale coefficient vectors, one per grid point. Penalized
/// columns enter each solve only when the sequential strong rule admits
/// them at the warm start; a KKT sweep afterwards readmits any violator
/// and refits, so screening never changes the solution.
#[allow(clippy::too_many_arguments)]
fn fit_cox_path(
    times: &[u32],
    events: &[u8],
    cols: &[Vec<f64>],
    usable: &[bool],
    mixing: f64,
    pf: &[f64],
    lambdas: &[f64],
) -> Vec<Vec<f64>> {
    let n = times.len();
    let p = cols.len();
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(lambdas.len());
    let mut eta = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut eligible = vec![false; p];
    let mut prev_lambda = lambdas.first().copied().unwrap_or(0.0);
    for &lambda in lambdas {
        let l1: Vec<f64> = pf.iter().map(|f| lambda * mixing * f).collect();
        let l2: Vec<f64> = pf.iter().map(|f| lambda * (1.0 - mixing) * f).collect();
        breslow_derivatives(times, events, &eta, &mut u, &mut w);
        for j in 0..p {
            eligible[j] = usable[j]
                && (pf[j] <= 0.0 || beta[j] != 0.0 || {
                    let g: f64 = cols[j].iter().zip(&u).map(|(x, ui)| x * ui).sum();
                    g.abs() >= mixing * pf[j] * (2.0 * lambda - prev_lambda)
                });
        }
        loop {
            fit_cox_core(times, events, cols, &eligible, &l1, &l2, &mut beta);
            eta.fill(0.0);
            for j in 0..p {
                if beta[j] != 0.0 {
                    for (ei, xi) in eta.iter_mut().zip(&cols[j]) {
                        *ei += xi * beta[j];
                    }
                }
            }
            breslow_derivatives(times, events, &eta, &mut u, &mut w);
            let mut violation = false;
            for j in 0..p {
                if usable[j] && !eligible[j] {
                    let g: f64 = cols[j].iter().zip(&u).map(|(x, ui)| x * ui).sum();
                    if g.abs() > l1[j] * (1.0 + 1e-9) {
                        eligible[j] = true;
                        violation = true;
                    }
                }
            }
            if !violation {
                break;
            }
        }
        out.push(beta.clone());
        prev_lambda = lambda;
    }
    out
}

/// Elastic-net proportional-hazards fit with the penalty weight chosen by
/// K-fold cross-validated partial likelihood: each left-out fold scores a
/// grid point by the all-data partial log-likelihood minus the training
/// partial log-likelihood at the training solution. Among grid points
/// within one paired fold-level standard error of the best score, the
/// largest penalty wins. The model is refit on all rows at that weight.
pub fn fit_cox_cv(
    times: &[u32],
    events: &[u8],
    design: &Design,
    mixing: f64,
    penalty_factors: Option<&[f64]>,
    folds: &FoldAssignment,
) -> Result<(CoxModel, CvReport), NuisanceError> {
    validate_survival_inputs(times, events, design)?;
    PenaltySpec { lambda: 0.0, mixing }.validate()?;
    if folds.n() != times.len() {
        return Err(NuisanceError::Model(ModelError::InvalidFolds(format!(
            "fold assignment covers {} records, data has {}",
            folds.n(),
            times.len()
        ))));
    }
    let p = design.p();
    let pf = expand_penalty_factors(penalty_factors, p)?;
    let (cols, std) = standardize(design);
    let lambdas = lambda_grid(times, events, &cols, &std.usable, mixing, &pf);

    let mut fold_scores = vec![vec![0.0f64; lambdas.len()]; folds.k()];
    for k in 0..folds.k() {
        let train = folds.train_indices(k);
        let t_times: Vec<u32> = train.iter().map(|&i| times[i]).collect();
        let t_events: Vec<u8> = train.iter().map(|&i| events[i]).collect();
        if !t_events.contains(&1) {
            return Err(NuisanceError::NoEvents);
        }
        // Standardize the training rows afresh; the penalty grid stays
        // shared across folds.
        let t_design = Design {
            kind: design.kind(),
            names: design.names().to_vec(),
            cols: design.cols.iter().map(|c| train.iter().map(|&i| c[i]).collect()).collect(),
            n: train.len(),
        };
        let (t_cols, t_std) = standardize(&t_design);
        let path =
            fit_cox_path(&t_times, &t_events, &t_cols, &t_std.usable, mixing, &pf, &lambdas);
        for (l, beta_std) in path.iter().enumerate() {
            let coef: Vec<f64> = (0..p).map(|j| beta_std[j] / t_std.scale[j]).collect();
            let eta_all: Vec<f64> = (0..design.n())
                .map(|i| (0..p).map(|j| design.cols[j][i] * coef[j]).sum())
                .collect();
            let eta_train: Vec<f64> = train.iter().map(|&i| eta_all[i]).collect();
            fold_scores[k][l] = partial_loglik(times, events, &eta_all)
                - partial_loglik(&t_times, &t_events, &eta_train);
        }
    }
    let scores: Vec<f64> =
        (0..lambdas.len()).map(|l| fold_scores.iter().map(|f| f[l]).sum()).collect();

    let mut best = 0;
    for l in 1..lambdas.len() {
        if scores[l] > scores[best] {
            best = l;
        }
    }
    // Paired one-standard-error rule: walk back up the grid to the largest
    // penalty whose score deficit against the best is within one standard
    // error of the fold-wise deficits. Pairing within folds cancels their
    // shared level, so a gain that shows up consistently across folds keeps
    // the smaller penalty while a flat, noisy stretch snaps to the larger.
    let kf = folds.k() as f64;
    let mut chosen = best;
    for l in 0..best {
        let diffs: Vec<f64> = fold_scores.iter().map(|f| f[best] - f[l]).collect();
        let mean = diffs.iter().sum::<f64>() / kf;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (kf - 1.0);
        if mean <= (var / kf).sqrt() {
            chosen = l;
            break;
        }
    }
    let path = fit_cox_path(
        times,
        events,
        &cols,
        &std.usable,
        mixing,
        &pf,
        &lambdas[..=chosen],
    );
    let beta_std = path.last().expect("path is non-empty");
    let model = finish_cox_model(
        times,
        events,
        design,
        &std,
        beta_std,
        Some(PenaltySpec { lambda: lambdas[chosen], mixing }),
        true,
        chosen + 1,
    );
    let report = CvReport { lambdas, scores, chosen };
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Cohort-level wrappers
// ---------------------------------------------------------------------------

/// Loss-to-follow-up response: a record counts as a censoring event exactly
/// when it was lost before the end of study (`delta` 0 and month < 61);
/// event times and administrative end-of-study censor the fit.
pub fn censoring_response(cohort: &Cohort) -> (Vec<u32>, Vec<u8>) {
    let times: Vec<u32> = cohort.records().iter().map(|r| r.z).collect();
    let events: Vec<u8> = cohort
        .records()
        .iter()
        .map(|r| u8::from(r.delta == 0 && r.z < MAX_MONTH))
        .collect();
    (times, events)
}

/// Unpenalized proportional-hazards fit of loss to follow-up on covariates
/// and treatment.
pub fn fit_censoring_model(cohort: &Cohort) -> Result<CoxModel, NuisanceError> {
    let design = Design::from_cohort(cohort, DesignKind::MainEffects);
    let (times, events) = censoring_response(cohort);
    fit_cox(&times, &events, &design, None, None)
}

/// Unpenalized proportional-hazards fit of the event time on covariates and
/// treatment, used for augmentation.
pub fn fit_outcome_model(cohort: &Cohort) -> Result<CoxModel, NuisanceError> {
    let design = Design::from_cohort(cohort, DesignKind::MainEffects);
    let times: Vec<u32> = cohort.records().iter().map(|r| r.z).collect();
    let events: Vec<u8> = cohort.records().iter().map(|r| r.delta).collect();
    fit_cox(&times, &events, &design, None, None)
}
