//! Stabilized inverse-probability weights for treatment and censoring.
//!
//! Treatment weights use logistic propensity models and empirical treatment
//! proportions as numerators. Censoring weights use logistic models for the
//! probability of remaining uncensored through each gap, with empirical
//! proportions as numerators.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::simgen::{censoring_indicators, Scenario, SubjectRecord};
use crate::statcore::{fit_logistic, StatError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("probability {name} = {value} is outside (0, 1)")]
    DegenerateProbability { name: &'static str, value: f64 },
    #[error("joint treatment table is invalid: {0}")]
    InvalidJointTable(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{model} model failed: {source}")]
    Model {
        model: &'static str,
        #[source]
        source: StatError,
    },
    #[error("no subject is uncensored at the first event")]
    NoUncensored,
    #[error("censoring indicators of subject {0} do not match tau")]
    IndicatorMismatch(usize),
    #[error("truncation percentile must lie in (0, 100], got {0}")]
    TruncationPercentile(f64),
}

/// `p_joint[i][j] = P(Z(1) = i, Z(2) = j)`.
pub type JointTable = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentWeights {
    pub sw1: Vec<f64>,
    pub sw2: Vec<f64>,
    /// Estimated `P(Z(1) = 1)`.
    pub p_marginal: f64,
    pub p_joint: JointTable,
    /// Fitted first-event propensity scores.
    pub e1: Vec<f64>,
    /// Fitted second-event propensity scores (equal to `e1` when treatment is fixed).
    pub e2: Vec<f64>,
}

/// Censoring weights; rows outside the relevant analysis carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringWeights {
    /// Nonzero exactly for subjects with `delta1 = 1`.
    pub sw1_dag: Vec<f64>,
    /// Nonzero exactly for subjects with `delta2 = 1`.
    pub sw2_dag: Vec<f64>,
    /// Empirical `P(delta1 = 1)`.
    pub p_delta1: f64,
    /// Empirical `P(delta2 = 1 | delta1 = 1)`.
    pub p_delta2_given_delta1: f64,
}

fn check_probability(name: &'static str, value: f64) -> Result<(), WeightError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(WeightError::DegenerateProbability { name, value })
    }
}

fn validate_joint(p: &JointTable) -> Result<(), WeightError> {
    let flat = [p[0][0], p[0][1], p[1][0], p[1][1]];
    if flat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(WeightError::InvalidJointTable(
            "entries must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = flat.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(WeightError::InvalidJointTable(format!(
            "entries sum to {total}"
        )));
    }
    Ok(())
}

/// Probability of the observed binary value under a Bernoulli(`p`).
#[inline]
fn prob_of(value: bool, p: f64) -> f64 {
    if value {
        p
    } else {
        1.0 - p
    }
}

/// `sw1 = p1 z1 / e1 + (1 - p1)(1 - z1) / (1 - e1)`.
pub fn stabilized_weight_e1(z1: bool, e1: f64, p1: f64) -> Result<f64, WeightError> {
    check_probability("e1", e1)?;
    check_probability("p1", p1)?;
    Ok(prob_of(z1, p1) / prob_of(z1, e1))
}

/// Four-term stabilized weight for the second event: the joint-table cell of
/// the observed treatment path over the product of its propensity factors.
pub fn stabilized_weight_e2(
    z1: bool,
    z2: bool,
    e1: f64,
    e2: f64,
    p_joint: &JointTable,
) -> Result<f64, WeightError> {
    check_probability("e1", e1)?;
    check_probability("e2", e2)?;
    validate_joint(p_joint)?;
    let cell = p_joint[z1 as usize][z2 as usize];
    Ok(cell / (prob_of(z1, e1) * prob_of(z2, e2)))
}

/// Second factor of `sw2` in product form:
/// `P(Z(2) = z2 | Z(1) = z1) / P(Z(2) = z2 | history)`.
pub fn second_factor_ratio(
    z1: bool,
    z2: bool,
    e2: f64,
    p_joint: &JointTable,
) -> Result<f64, WeightError> {
    check_probability("e2", e2)?;
    validate_joint(p_joint)?;
    let row = p_joint[z1 as usize];
    let arm = row[0] + row[1];
    if arm <= 0.0 {
        return Err(WeightError::InvalidJointTable(format!(
            "no mass on Z(1) = {}",
            z1 as u8
        )));
    }
    Ok((row[z2 as usize] / arm) / prob_of(z2, e2))
}

fn design(rows: usize, columns: &[&dyn Fn(usize) -> f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, columns.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            columns[j - 1](i)
        }
    })
}

fn as_f64(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Fits the scenario's propensity models and builds per-subject stabilized
/// treatment weights.
///
/// Fixed-treatment scenarios have a degenerate second treatment decision, so
/// `sw2 = sw1` there and `e2` repeats `e1`.
pub fn build_treatment_weights(
    dataset: &[SubjectRecord],
    scenario: Scenario,
) -> Result<TreatmentWeights, WeightError> {
    let n = dataset.len();
    if n == 0 {
        return Err(WeightError::EmptyDataset);
    }
    let z1: Vec<bool> = dataset.iter().map(|r| r.z1).collect();
    let x1 = |i: usize| dataset[i].x1;
    let fit1 = fit_logistic(&design(n, &[&x1]), &z1, None).map_err(|source| WeightError::Model {
        model: "first-event propensity",
        source,
    })?;
    let e1 = fit1.fitted_probabilities;

    let nf = n as f64;
    let mut counts = [[0usize; 2]; 2];
    for r in dataset {
        let z2 = if scenario.time_varying_treatment() { r.z2 } else { r.z1 };
        counts[r.z1 as usize][z2 as usize] += 1;
    }
    let p_joint: JointTable = [
        [counts[0][0] as f64 / nf, counts[0][1] as f64 / nf],
        [counts[1][0] as f64 / nf, counts[1][1] as f64 / nf],
    ];
    let p_marginal = (counts[1][0] + counts[1][1]) as f64 / nf;

    let sw1 = z1
        .iter()
        .zip(&e1)
        .map(|(&z, &e)| stabilized_weight_e1(z, e, p_marginal))
        .collect::<Result<Vec<_>, _>>()?;

    let (sw2, e2) = if scenario.time_varying_treatment() {
        let z2: Vec<bool> = dataset.iter().map(|r| r.z2).collect();
        let x2 = |i: usize| dataset[i].x2;
        let prev = |i: usize| as_f64(dataset[i].z1);
        let fit2 = fit_logistic(&design(n, &[&x2, &prev]), &z2, None).map_err(|source| {
            WeightError::Model {
                model: "second-event propensity",
                source,
            }
        })?;
        let e2 = fit2.fitted_probabilities;
        let sw2 = (0..n)
            .map(|i| stabilized_weight_e2(z1[i], z2[i], e1[i], e2[i], &p_joint))
            .collect::<Result<Vec<_>, _>>()?;
        (sw2, e2)
    } else {
        (sw1.clone(), e1.clone())
    };

    Ok(TreatmentWeights {
        sw1,
        sw2,
        p_marginal,
        p_joint,
        e1,
        e2,
    })
}

/// Builds stabilized censoring weights for administrative censoring at `tau`.
///
/// The first-gap model regresses `delta1` on `(x1, z1)` over all subjects; the
/// second-gap model regresses `delta2` on `(x1, x2, z1, z2)` over subjects with
/// `delta1 = 1`, dropping history columns that duplicate others (fixed
/// covariate or fixed treatment). A model whose response is constant is not
/// fitted and its ratio is 1.
pub fn build_censoring_weights(
    dataset: &[SubjectRecord],
    tau: f64,
) -> Result<CensoringWeights, WeightError> {
    let n = dataset.len();
    if n == 0 {
        return Err(WeightError::EmptyDataset);
    }
    for (i, r) in dataset.iter().enumerate() {
        if censoring_indicators(r.w1, r.w2, Some(tau)) != (r.delta1, r.delta2) {
            return Err(WeightError::IndicatorMismatch(i));
        }
    }
    let observed1: Vec<usize> = (0..n).filter(|&i| dataset[i].delta1).collect();
    if observed1.is_empty() {
        return Err(WeightError::NoUncensored);
    }
    let p_delta1 = observed1.len() as f64 / n as f64;

    let mut sw1_dag = vec![0.0; n];
    if observed1.len() == n {
        sw1_dag.iter_mut().for_each(|w| *w = 1.0);
    } else {
        let d1: Vec<bool> = dataset.iter().map(|r| r.delta1).collect();
        let x1 = |i: usize| dataset[i].x1;
        let z1 = |i: usize| as_f64(dataset[i].z1);
        let fit = fit_logistic(&design(n, &[&x1, &z1]), &d1, None).map_err(|source| {
            WeightError::Model {
                model: "first-gap censoring",
                source,
            }
        })?;
        for &i in &observed1 {
            sw1_dag[i] = p_delta1 / fit.fitted_probabilities[i];
        }
    }

    let sub: Vec<&SubjectRecord> = observed1.iter().map(|&i| &dataset[i]).collect();
    let m = sub.len();
    let observed2 = sub.iter().filter(|r| r.delta2).count();
    let p_delta2_given_delta1 = observed2 as f64 / m as f64;
    let mut sw2_dag = vec![0.0; n];
    if observed2 == m {
        for &i in &observed1 {
            sw2_dag[i] = sw1_dag[i];
        }
    } else if observed2 > 0 {
        let d2: Vec<bool> = sub.iter().map(|r| r.delta2).collect();
        let x1 = |k: usize| sub[k].x1;
        let x2 = |k: usize| sub[k].x2;
        let z1 = |k: usize| as_f64(sub[k].z1);
        let z2 = |k: usize| as_f64(sub[k].z2);
        let mut columns: Vec<&dyn Fn(usize) -> f64> = vec![&x1];
        if sub.iter().any(|r| r.x2 != r.x1) {
            columns.push(&x2);
        }
        columns.push(&z1);
        if sub.iter().any(|r| r.z2 != r.z1) {
            columns.push(&z2);
        }
        let fit = fit_logistic(&design(m, &columns), &d2, None).map_err(|source| {
            WeightError::Model {
                model: "second-gap censoring",
                source,
            }
        })?;
        for (k, &i) in observed1.iter().enumerate() {
            if dataset[i].delta2 {
                sw2_dag[i] = sw1_dag[i] * p_delta2_given_delta1 / fit.fitted_probabilities[k];
            }
        }
    }

    Ok(CensoringWeights {
        sw1_dag,
        sw2_dag,
        p_delta1,
        p_delta2_given_delta1,
    })
}

/// Caps weights at their `percentile`-th sample percentile (nearest rank).
pub fn truncate_weights(weights: &mut [f64], percentile: f64) -> Result<(), WeightError> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(WeightError::TruncationPercentile(percentile));
    }
    if weights.is_empty() {
        return Ok(());
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    let cap = sorted[rank.clamp(1, sorted.len()) - 1];
    weights.iter_mut().for_each(|w| *w = w.min(cap));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_dataset, ScenarioConfig};
    use crate::statcore::RngStream;
    use proptest::prelude::*;

    #[test]
    fn first_event_weight_examples() {
        assert!((stabilized_weight_e1(true, 0.5, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!((stabilized_weight_e1(false, 0.2, 0.25).unwrap() - 0.9375).abs() < 1e-15);
        assert!(stabilized_weight_e1(true, 1.0, 0.25).is_err());
        assert!(stabilized_weight_e1(true, 0.0, 0.25).is_err());
    }

    #[test]
    fn second_event_weight_examples() {
        let p = [[0.5, 0.2], [0.2, 0.1]];
        assert!((stabilized_weight_e2(true, true, 0.5, 0.4, &p).unwrap() - 0.5).abs() < 1e-15);
        let p = [[0.25, 0.25], [0.25, 0.25]];
        assert!((stabilized_weight_e2(false, false, 0.5, 0.5, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!(stabilized_weight_e2(false, false, 0.5, 1.0, &p).is_err());
        let bad = [[0.5, 0.5], [0.5, 0.5]];
        assert!(matches!(
            stabilized_weight_e2(false, false, 0.5, 0.5, &bad),
            Err(WeightError::InvalidJointTable(_))
        ));
    }

    proptest! {
        #[test]
        fn four_term_form_equals_product_form(
            z1 in any::<bool>(), z2 in any::<bool>(),
            e1 in 0.01f64..0.99, e2 in 0.01f64..0.99,
            a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0, d in 0.05f64..1.0,
        ) {
            let s = a + b + c + d;
            let mut p = [[a / s, b / s], [c / s, d / s]];
            // renormalize so the table sums to one within rounding
            let total = p[0][0] + p[0][1] + p[1][0] + p[1][1];
            p[1][1] += 1.0 - total;
            let p1 = p[1][0] + p[1][1];
            let four = stabilized_weight_e2(z1, z2, e1, e2, &p).unwrap();
            let product = stabilized_weight_e1(z1, e1, p1).unwrap()
                * second_factor_ratio(z1, z2, e2, &p).unwrap();
            prop_assert!((four - product).abs() <= 1e-12 * four.max(1.0));
            prop_assert!(four > 0.0);
        }
    }

    #[test]
    fn weight_depends_on_x_only_through_e1() {
        let a = stabilized_weight_e1(true, 0.3, 0.25).unwrap();
        let b = stabilized_weight_e1(true, 0.3, 0.25).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn all_treated_input_is_separation() {
        let cfg = ScenarioConfig::new(Scenario::IndependentGaps, 50);
        let mut data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        data.iter_mut().for_each(|r| {
            r.z1 = true;
            r.z2 = true;
        });
        let err = build_treatment_weights(&data, Scenario::IndependentGaps).unwrap_err();
        assert!(matches!(
            err,
            WeightError::Model { source: StatError::Separation(_), .. }
        ));
    }

    #[test]
    fn joint_table_is_consistent() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 2_000).with_beta_c(0.4);
        let data = gen_dataset(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let tw = build_treatment_weights(&data, Scenario::TVTreatmentCovariates).unwrap();
        let total: f64 = tw.p_joint.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((tw.p_joint[1][0] + tw.p_joint[1][1] - tw.p_marginal).abs() < 1e-12);
        assert!(tw.sw1.iter().chain(&tw.sw2).all(|w| w.is_finite() && *w > 0.0));
    }

    #[test]
    fn fixed_treatment_second_weight_is_first() {
        let cfg = ScenarioConfig::new(Scenario::TVCovariates, 1_000);
        let data = gen_dataset(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let tw = build_treatment_weights(&data, Scenario::TVCovariates).unwrap();
        assert_eq!(tw.sw1, tw.sw2);
        assert_eq!(tw.p_joint[0][1], 0.0);
        assert_eq!(tw.p_joint[1][0], 0.0);
    }

    #[test]
    fn everyone_uncensored_short_circuits() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 300).with_tau(Some(1e9));
        let data = gen_dataset(&cfg, &mut RngStream::new(9, 0)).unwrap();
        let cw = build_censoring_weights(&data, 1e9).unwrap();
        assert!(cw.sw1_dag.iter().all(|&w| w == 1.0));
        assert!(cw.sw2_dag.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn censoring_weights_support() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 5_000)
            .with_beta_c(0.46)
            .with_tau(Some(1.0));
        let data = gen_dataset(&cfg, &mut RngStream::new(12, 0)).unwrap();
        let cw = build_censoring_weights(&data, 1.0).unwrap();
        for (i, r) in data.iter().enumerate() {
            assert_eq!(cw.sw1_dag[i] > 0.0, r.delta1);
            assert_eq!(cw.sw2_dag[i] > 0.0, r.delta2);
        }
        // E[delta * p / p(x)] = p, so the mean weight over the uncensored is ~1
        let obs: Vec<f64> = cw.sw1_dag.iter().copied().filter(|&w| w > 0.0).collect();
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn censoring_weights_check_tau_and_support() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 200).with_tau(Some(1.0));
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert!(matches!(
            build_censoring_weights(&data, 0.5),
            Err(WeightError::IndicatorMismatch(_))
        ));
        let cfg = cfg.with_tau(Some(1e-9));
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(build_censoring_weights(&data, 1e-9), Err(WeightError::NoUncensored));
    }

    #[test]
    fn scenario_one_censoring_design_drops_duplicates() {
        let cfg = ScenarioConfig::new(Scenario::IndependentGaps, 3_000)
            .with_beta_c(0.5)
            .with_tau(Some(1.5));
        let data = gen_dataset(&cfg, &mut RngStream::new(2, 0)).unwrap();
        let cw = build_censoring_weights(&data, 1.5).unwrap();
        assert!(cw.sw2_dag.iter().any(|&w| w > 0.0));
    }

    #[test]
    fn truncation_caps_at_percentile() {
        let mut w: Vec<f64> = (1..=100).map(f64::from).collect();
        truncate_weights(&mut w, 99.0).unwrap();
        assert_eq!(w[99], 99.0);
        assert_eq!(w[98], 99.0);
        assert_eq!(w[0], 1.0);
        assert!(truncate_weights(&mut w, 0.0).is_err());
    }
}
