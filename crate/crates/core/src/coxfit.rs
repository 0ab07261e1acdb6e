//! Weighted Cox proportional-hazards regression on a single binary treatment
//! covariate.
//!
//! The partial likelihood uses the Breslow convention for tied times: every
//! row whose time equals an event time is in that event's risk set, and all
//! events in a tie group share one risk-set denominator. Case weights enter
//! both the event term and the risk-set sums.
//!
//! Robust variance is the cluster sandwich `I^{-1} (sum_g s_g^2) I^{-1}`
//! where `s_g` sums the weighted score residuals of the rows in cluster `g`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NEWTON_MAX_ITER: usize = 50;
pub const MAX_STEP_HALVINGS: usize = 10;
pub const SCORE_TOLERANCE: f64 = 1e-9;
pub const STEP_TOLERANCE: f64 = 1e-10;
/// `|beta|` beyond this during iteration is reported as a monotone likelihood.
pub const MONOTONE_BOUND: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("sample is empty")]
    Empty,
    #[error("column `{what}` has {len} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("row {row}: time must be finite and strictly positive, got {value}")]
    InvalidTime { row: usize, value: f64 },
    #[error("row {row}: weight must be finite and nonnegative, got {value}")]
    InvalidWeight { row: usize, value: f64 },
    #[error("monotone likelihood: {0}")]
    MonotoneLikelihood(String),
    #[error("Newton-Raphson did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("observed information is zero or non-finite")]
    SingularInformation,
}

/// Right-censored survival data with one binary treatment column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurvivalSample {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub treatment: Vec<bool>,
    pub weight: Vec<f64>,
    /// Rows sharing an id form one cluster for the robust variance.
    pub cluster: Vec<usize>,
}

impl SurvivalSample {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            time: Vec::with_capacity(n),
            event: Vec::with_capacity(n),
            treatment: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
            cluster: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, time: f64, event: bool, treatment: bool, weight: f64, cluster: usize) {
        self.time.push(time);
        self.event.push(event);
        self.treatment.push(treatment);
        self.weight.push(weight);
        self.cluster.push(cluster);
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn validate(&self) -> Result<(), CoxError> {
        let n = self.time.len();
        if n == 0 {
            return Err(CoxError::Empty);
        }
        for (what, len) in [
            ("event", self.event.len()),
            ("treatment", self.treatment.len()),
            ("weight", self.weight.len()),
            ("cluster", self.cluster.len()),
        ] {
            if len != n {
                return Err(CoxError::LengthMismatch {
                    what,
                    len,
                    expected: n,
                });
            }
        }
        for (row, &t) in self.time.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(CoxError::InvalidTime { row, value: t });
            }
        }
        for (row, &w) in self.weight.iter().enumerate() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(CoxError::InvalidWeight { row, value: w });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub log_hr: f64,
    pub naive_se: f64,
    pub robust_se: f64,
    pub n_iter: usize,
    pub converged: bool,
}

/// Rows sorted by decreasing time and split into groups of tied times.
struct RiskOrder {
    /// Row indices by decreasing time.
    rows: Vec<usize>,
    /// `(start, end)` ranges into `rows`, one per distinct time, decreasing.
    groups: Vec<(usize, usize)>,
}

impl RiskOrder {
    fn new(sample: &SurvivalSample) -> Self {
        let mut rows: Vec<usize> = (0..sample.len()).collect();
        rows.sort_by(|&a, &b| sample.time[b].total_cmp(&sample.time[a]));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=rows.len() {
            if k == rows.len() || sample.time[rows[k]] != sample.time[rows[start]] {
                groups.push((start, k));
                start = k;
            }
        }
        Self { rows, groups }
    }
}

/// Per tie-group quantities at a given beta.
struct GroupStats {
    /// Weighted risk-set size `sum w exp(beta z)` over time >= t.
    s0: f64,
    /// Weighted treated fraction of the risk set.
    zbar: f64,
    /// Sum of weights of events at this time.
    event_weight: f64,
    /// Sum of weights of treated events at this time.
    treated_event_weight: f64,
}

struct Evaluation {
    loglik: f64,
    score: f64,
    information: f64,
}

fn group_stats(sample: &SurvivalSample, order: &RiskOrder, beta: f64) -> Vec<GroupStats> {
    let risk_treated = beta.exp();
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut out = Vec::with_capacity(order.groups.len());
    for &(start, end) in &order.groups {
        let mut event_weight = 0.0;
        let mut treated_event_weight = 0.0;
        for &i in &order.rows[start..end] {
            let w = sample.weight[i];
            if sample.treatment[i] {
                let r = w * risk_treated;
                s0 += r;
                s1 += r;
            } else {
                s0 += w;
            }
            if sample.event[i] {
                event_weight += w;
                if sample.treatment[i] {
                    treated_event_weight += w;
                }
            }
        }
        out.push(GroupStats {
            s0,
            zbar: if s0 > 0.0 { s1 / s0 } else { 0.0 },
            event_weight,
            treated_event_weight,
        });
    }
    out
}

fn evaluate(sample: &SurvivalSample, order: &RiskOrder, beta: f64) -> Evaluation {
    let mut loglik = 0.0;
    let mut score = 0.0;
    let mut information = 0.0;
    for g in group_stats(sample, order, beta) {
        if g.event_weight == 0.0 {
            continue;
        }
        loglik += beta * g.treated_event_weight - g.event_weight * g.s0.ln();
        score += g.treated_event_weight - g.event_weight * g.zbar;
        information += g.event_weight * g.zbar * (1.0 - g.zbar);
    }
    Evaluation {
        loglik,
        score,
        information,
    }
}

/// Weighted log partial likelihood at `beta` (Breslow ties).
///
/// Assumes a sample that passes [`SurvivalSample::validate`].
pub fn partial_loglik(beta: f64, sample: &SurvivalSample) -> f64 {
    let order = RiskOrder::new(sample);
    evaluate(sample, &order, beta).loglik
}

/// Weighted score `dl/dbeta` at `beta`.
pub fn score(beta: f64, sample: &SurvivalSample) -> f64 {
    let order = RiskOrder::new(sample);
    evaluate(sample, &order, beta).score
}

/// The score tends to `sum_events w (z - 1[treated in risk set])` as beta
/// grows and to `sum_events w (z - 1[only treated at risk])` as it falls; the
/// maximizer is finite iff the first limit is negative and the second positive.
fn check_finite_maximizer(sample: &SurvivalSample, order: &RiskOrder) -> Result<(), CoxError> {
    let mut treated_at_risk = 0.0;
    let mut control_at_risk = 0.0;
    let mut limit_up = 0.0;
    let mut limit_down = 0.0;
    for &(start, end) in &order.groups {
        for &i in &order.rows[start..end] {
            if sample.treatment[i] {
                treated_at_risk += sample.weight[i];
            } else {
                control_at_risk += sample.weight[i];
            }
        }
        for &i in &order.rows[start..end] {
            let w = sample.weight[i];
            if !sample.event[i] || w == 0.0 {
                continue;
            }
            let z = if sample.treatment[i] { 1.0 } else { 0.0 };
            let up = if treated_at_risk > 0.0 { 1.0 } else { 0.0 };
            let down = if control_at_risk > 0.0 { 0.0 } else { 1.0 };
            limit_up += w * (z - up);
            limit_down += w * (z - down);
        }
    }
    if limit_up >= 0.0 {
        return Err(CoxError::MonotoneLikelihood(
            "partial likelihood increases without bound in beta".into(),
        ));
    }
    if limit_down <= 0.0 {
        return Err(CoxError::MonotoneLikelihood(
            "partial likelihood increases without bound as beta decreases".into(),
        ));
    }
    Ok(())
}

/// Newton-Raphson maximizer of the weighted partial likelihood, with naive
/// and cluster-robust standard errors.
pub fn fit_weighted_cox(sample: &SurvivalSample) -> Result<CoxFit, CoxError> {
    sample.validate()?;
    let order = RiskOrder::new(sample);
    check_finite_maximizer(sample, &order)?;

    let mut beta = 0.0;
    let mut current = evaluate(sample, &order, beta);
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < NEWTON_MAX_ITER {
        if current.score.abs() < SCORE_TOLERANCE {
            converged = true;
            break;
        }
        if !(current.information > 0.0 && current.information.is_finite()) {
            return Err(CoxError::SingularInformation);
        }
        n_iter += 1;
        let mut step = current.score / current.information;
        let mut candidate = beta + step;
        let mut next = evaluate(sample, &order, candidate);
        let mut halvings = 0;
        while !(next.loglik >= current.loglik) && halvings < MAX_STEP_HALVINGS {
            step *= 0.5;
            candidate = beta + step;
            next = evaluate(sample, &order, candidate);
            halvings += 1;
        }
        if candidate.abs() > MONOTONE_BOUND {
            return Err(CoxError::MonotoneLikelihood(format!(
                "|beta| exceeded {MONOTONE_BOUND} at iteration {n_iter}"
            )));
        }
        beta = candidate;
        current = next;
        if step.abs() < STEP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoxError::NoConvergence(n_iter));
    }
    if !(current.information > 0.0 && current.information.is_finite()) {
        return Err(CoxError::SingularInformation);
    }

    let naive_se = current.information.recip().sqrt();
    let robust_se = robust_variance_ordered(sample, &order, beta, current.information).sqrt();
    Ok(CoxFit {
        log_hr: beta,
        naive_se,
        robust_se,
        n_iter,
        converged,
    })
}

/// Cluster-robust (sandwich) variance of the log hazard ratio at `log_hr`.
pub fn robust_variance(sample: &SurvivalSample, log_hr: f64) -> Result<f64, CoxError> {
    sample.validate()?;
    let order = RiskOrder::new(sample);
    let information = evaluate(sample, &order, log_hr).information;
    if !(information > 0.0 && information.is_finite()) {
        return Err(CoxError::SingularInformation);
    }
    Ok(robust_variance_ordered(sample, &order, log_hr, information))
}

fn robust_variance_ordered(
    sample: &SurvivalSample,
    order: &RiskOrder,
    beta: f64,
    information: f64,
) -> f64 {
    let residuals = score_residuals_ordered(sample, order, beta);
    let n_clusters = sample.cluster.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; n_clusters];
    for (i, r) in residuals.iter().enumerate() {
        sums[sample.cluster[i]] += sample.weight[i] * r;
    }
    let meat: f64 = sums.iter().map(|s| s * s).sum();
    meat / (information * information)
}

/// Unweighted score residuals `L_i` at `beta`, one per row.
///
/// `L_i = delta_i (z_i - zbar(t_i)) - exp(beta z_i) sum_{t_j <= t_i} w_j
/// dN_j (z_i - zbar(t_j)) / S0(t_j)`, so that `sum_i w_i L_i` is the score.
pub fn score_residuals(sample: &SurvivalSample, beta: f64) -> Result<Vec<f64>, CoxError> {
    sample.validate()?;
    let order = RiskOrder::new(sample);
    Ok(score_residuals_ordered(sample, &order, beta))
}

fn score_residuals_ordered(sample: &SurvivalSample, order: &RiskOrder, beta: f64) -> Vec<f64> {
    let stats = group_stats(sample, order, beta);
    let mut residuals = vec![0.0; sample.len()];
    // Increasing time: accumulate the compensator increments.
    let mut hazard = 0.0;
    let mut hazard_zbar = 0.0;
    for (g, &(start, end)) in stats.iter().zip(&order.groups).rev() {
        if g.event_weight > 0.0 {
            hazard += g.event_weight / g.s0;
            hazard_zbar += g.event_weight * g.zbar / g.s0;
        }
        for &i in &order.rows[start..end] {
            let z = if sample.treatment[i] { 1.0 } else { 0.0 };
            let risk = (beta * z).exp();
            let mut r = -risk * (z * hazard - hazard_zbar);
            if sample.event[i] {
                r += z - g.zbar;
            }
            residuals[i] = r;
        }
    }
    residuals
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(times: &[f64], events: &[bool], z: &[bool], w: &[f64]) -> SurvivalSample {
        SurvivalSample {
            time: times.to_vec(),
            event: events.to_vec(),
            treatment: z.to_vec(),
            weight: w.to_vec(),
            cluster: (0..times.len()).collect(),
        }
    }

    fn three_subjects() -> SurvivalSample {
        sample(
            &[1.0, 2.0, 3.0],
            &[true; 3],
            &[true, false, true],
            &[1.0; 3],
        )
    }

    #[test]
    fn loglik_by_hand_at_zero() {
        let ll = partial_loglik(0.0, &three_subjects());
        let expected = (1.0f64 / 3.0).ln() + 0.5f64.ln();
        assert!((ll - expected).abs() < 1e-9);
        assert!((ll + 1.7918).abs() < 1e-4);
    }

    #[test]
    fn closed_form_three_subjects() {
        // Score: 1 - 2e^b/(2e^b+1) + 1 - e^b/(e^b+1) = 0  =>  2 e^{2b} = 1.
        let fit = fit_weighted_cox(&three_subjects()).unwrap();
        assert!((fit.log_hr + 0.5 * 2f64.ln()).abs() < 1e-10);
        assert!((fit.log_hr + 0.3466).abs() < 1e-4);
        assert!(fit.converged);
        assert!(fit.naive_se > 0.0 && fit.robust_se > 0.0);
    }

    #[test]
    fn treatment_drops_out_when_constant() {
        let s = sample(
            &[0.5, 1.5, 2.5, 3.5],
            &[true, false, true, true],
            &[true; 4],
            &[1.0; 4],
        );
        // risk sets of size 4, 2, 1 at the three event times
        let expected = (1.0f64 / 4.0).ln() + (1.0f64 / 2.0).ln() + 1.0f64.ln();
        assert!((partial_loglik(0.0, &s) - expected).abs() < 1e-12);
    }

    #[test]
    fn no_contrast_is_monotone() {
        let s = sample(&[1.0, 2.0, 3.0], &[true; 3], &[false; 3], &[1.0; 3]);
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::MonotoneLikelihood(_))));
        let s = sample(&[1.0, 2.0, 3.0], &[true; 3], &[true; 3], &[1.0; 3]);
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::MonotoneLikelihood(_))));
    }

    #[test]
    fn ordered_arms_are_monotone() {
        // every treated subject fails before every control
        let s = sample(
            &[1.0, 2.0, 3.0, 4.0],
            &[true; 4],
            &[true, true, false, false],
            &[1.0; 4],
        );
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::MonotoneLikelihood(_))));
    }

    #[test]
    fn doubling_weights_shifts_loglik_only() {
        let s = sample(
            &[0.3, 0.9, 1.4, 2.2, 2.9],
            &[true, true, false, true, true],
            &[true, false, true, false, true],
            &[0.7, 1.3, 0.4, 2.0, 1.1],
        );
        let mut d = s.clone();
        d.weight.iter_mut().for_each(|w| *w *= 2.0);
        let shift0 = partial_loglik(0.0, &d) - 2.0 * partial_loglik(0.0, &s);
        for &b in &[-1.0, -0.2, 0.4, 1.5] {
            let shift = partial_loglik(b, &d) - 2.0 * partial_loglik(b, &s);
            assert!((shift - shift0).abs() < 1e-12);
        }
        let a = fit_weighted_cox(&s).unwrap();
        let b = fit_weighted_cox(&d).unwrap();
        assert!((a.log_hr - b.log_hr).abs() < 1e-10);
    }

    #[test]
    fn ties_use_breslow_denominator() {
        // Two tied events at t=1 with risk set of all four rows.
        let s = sample(
            &[1.0, 1.0, 2.0, 3.0],
            &[true, true, true, false],
            &[true, false, true, false],
            &[1.0; 4],
        );
        let b = 0.3f64;
        let e = b.exp();
        let expected = b - 2.0 * (2.0 * e + 2.0).ln() + b - (e + 1.0).ln();
        assert!((partial_loglik(b, &s) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_cluster_contributes_nothing() {
        let mut s = sample(
            &[0.3, 0.9, 1.4, 2.2, 2.9, 3.1],
            &[true, true, false, true, true, true],
            &[true, false, true, false, true, false],
            &[0.7, 1.3, 0.4, 2.0, 1.1, 0.0],
        );
        s.cluster = vec![0, 1, 2, 3, 4, 5];
        let fit = fit_weighted_cox(&s).unwrap();
        let v = robust_variance(&s, fit.log_hr).unwrap();
        // dropping the zero-weight row leaves every other quantity unchanged
        let mut t = s.clone();
        for col in [&mut t.time, &mut t.weight] {
            col.pop();
        }
        t.event.pop();
        t.treatment.pop();
        t.cluster.pop();
        let fit_t = fit_weighted_cox(&t).unwrap();
        assert!((fit.log_hr - fit_t.log_hr).abs() < 1e-12);
        assert!((v - robust_variance(&t, fit_t.log_hr).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn residuals_sum_to_score() {
        let s = sample(
            &[0.3, 0.9, 1.4, 2.2, 2.9, 0.9],
            &[true, true, false, true, true, true],
            &[true, false, true, false, true, true],
            &[0.7, 1.3, 0.4, 2.0, 1.1, 0.6],
        );
        for &b in &[-0.7, 0.0, 0.8] {
            let r = score_residuals(&s, b).unwrap();
            let total: f64 = r.iter().zip(&s.weight).map(|(r, w)| r * w).sum();
            assert!((total - score(b, &s)).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_errors() {
        let mut s = three_subjects();
        s.time[1] = 0.0;
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::InvalidTime { row: 1, .. })));
        let mut s = three_subjects();
        s.weight[2] = f64::NAN;
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::InvalidWeight { row: 2, .. })));
        let mut s = three_subjects();
        s.cluster.pop();
        assert!(matches!(fit_weighted_cox(&s), Err(CoxError::LengthMismatch { .. })));
        assert_eq!(fit_weighted_cox(&SurvivalSample::default()), Err(CoxError::Empty));
    }
}
