//! Synthetic two-gap-time cohorts.
//!
//! Every subject consumes the same six draws in the same order regardless of
//! scenario (`x1`, treatment-1 uniform, `u1`, `u2`, drift `v`, treatment-2
//! uniform), so the first-event margin is identical across scenarios for a
//! given stream and the potential-outcome cohort is coupled to the observed
//! one draw for draw.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::statcore::{expit, RngStream};

/// Intercept of the first treatment model giving 25% prevalence.
pub const ALPHA0_PREVALENCE_25: f64 = -1.1392;
/// By symmetry of the standard-normal covariate, a zero intercept gives 50%.
pub const ALPHA0_PREVALENCE_50: f64 = 0.0;
/// Intercepts of the second treatment model for 25% / 50% prevalence.
pub const GAMMA0_PREVALENCE_25: f64 = -1.7233;
pub const GAMMA0_PREVALENCE_50: f64 = -0.1000;

pub fn ln_1_5() -> f64 {
    1.5f64.ln()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("n_subjects must be at least 2, got {0}")]
    TooFewSubjects(usize),
    #[error("baseline_rate must be positive and finite, got {0}")]
    BaselineRate(f64),
    #[error("drift_sd must be positive and finite, got {0}")]
    DriftSd(f64),
    #[error("tau must be positive and finite, got {0}")]
    Tau(f64),
    #[error("truncation percentile must lie in (0, 100], got {0}")]
    Truncation(f64),
    #[error("parameter `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("prevalence must be 0.25 or 0.5, got {0}")]
    Prevalence(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Time-fixed covariate and treatment; both gaps share one linear predictor.
    IndependentGaps,
    /// Covariate drifts between gaps, treatment fixed.
    TVCovariates,
    /// Covariate drifts and treatment is re-assigned at the second gap.
    TVTreatmentCovariates,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::IndependentGaps => "independent",
            Scenario::TVCovariates => "tv-covariates",
            Scenario::TVTreatmentCovariates => "tv-treatment",
        }
    }

    pub fn time_varying_treatment(self) -> bool {
        matches!(self, Scenario::TVTreatmentCovariates)
    }

    pub fn covariate_drift(self) -> bool {
        !matches!(self, Scenario::IndependentGaps)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(Scenario::IndependentGaps),
            "tv-covariates" => Ok(Scenario::TVCovariates),
            "tv-treatment" => Ok(Scenario::TVTreatmentCovariates),
            other => Err(format!(
                "unknown scenario `{other}` (expected independent, tv-covariates or tv-treatment)"
            )),
        }
    }
}

/// Full parameterization of a data-generating scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub alpha0: f64,
    pub alpha1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Covariate effect on the log hazard.
    pub beta1: f64,
    /// Conditional log hazard ratio of treatment.
    pub beta_c: f64,
    pub baseline_rate: f64,
    /// Standard deviation of the covariate drift `v` (variance 16 by default).
    pub drift_sd: f64,
    pub tau: Option<f64>,
    /// Analysis weights are capped at this sample percentile when set.
    #[serde(default)]
    pub truncate_percentile: Option<f64>,
}

impl ScenarioConfig {
    /// Defaults at 25% prevalence, no censoring, and a null treatment effect.
    pub fn new(scenario: Scenario, n_subjects: usize) -> Self {
        Self {
            scenario,
            n_subjects,
            alpha0: ALPHA0_PREVALENCE_25,
            alpha1: ln_1_5(),
            gamma0: GAMMA0_PREVALENCE_25,
            gamma1: ln_1_5(),
            gamma2: ln_1_5(),
            beta1: ln_1_5(),
            beta_c: 0.0,
            baseline_rate: 1.0,
            drift_sd: 4.0,
            tau: None,
            truncate_percentile: None,
        }
    }

    /// Sets the treatment-model intercept that targets `prevalence`.
    ///
    /// Under time-varying treatment the target applies to the second-event
    /// treatment and the first-event model keeps 25% prevalence.
    pub fn with_prevalence(mut self, prevalence: f64) -> Result<Self, ConfigError> {
        let is = |p: f64| (prevalence - p).abs() < 1e-12;
        let (alpha0, gamma0) = if is(0.25) {
            (ALPHA0_PREVALENCE_25, GAMMA0_PREVALENCE_25)
        } else if is(0.5) {
            if self.scenario.time_varying_treatment() {
                (ALPHA0_PREVALENCE_25, GAMMA0_PREVALENCE_50)
            } else {
                (ALPHA0_PREVALENCE_50, GAMMA0_PREVALENCE_25)
            }
        } else {
            return Err(ConfigError::Prevalence(prevalence));
        };
        self.alpha0 = alpha0;
        self.gamma0 = gamma0;
        Ok(self)
    }

    pub fn with_beta_c(mut self, beta_c: f64) -> Self {
        self.beta_c = beta_c;
        self
    }

    pub fn with_tau(mut self, tau: Option<f64>) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_truncation(mut self, percentile: Option<f64>) -> Self {
        self.truncate_percentile = percentile;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(p) = self.truncate_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(ConfigError::Truncation(p));
            }
        }
        if self.n_subjects < 2 {
            return Err(ConfigError::TooFewSubjects(self.n_subjects));
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate.is_finite()) {
            return Err(ConfigError::BaselineRate(self.baseline_rate));
        }
        if !(self.drift_sd > 0.0 && self.drift_sd.is_finite()) {
            return Err(ConfigError::DriftSd(self.drift_sd));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(ConfigError::Tau(tau));
            }
        }
        for (name, v) in [
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("beta1", self.beta1),
            ("beta_c", self.beta_c),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// Gap times of one subject under forced treatment and forced control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub w1_treated: f64,
    pub w1_control: f64,
    pub w2_treated: f64,
    pub w2_control: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub x1: f64,
    pub x2: f64,
    pub z1: bool,
    pub z2: bool,
    pub w1: f64,
    pub w2: f64,
    pub delta1: bool,
    pub delta2: bool,
    pub potential: Option<PotentialOutcomes>,
}

/// Inverse-transform draw from an exponential-baseline proportional hazard:
/// `-ln(u) / (rate * exp(linear_predictor))`.
#[inline]
pub fn gen_gap_time(u: f64, linear_predictor: f64, rate: f64) -> f64 {
    -u.ln() / (rate * linear_predictor.exp())
}

/// Censoring indicators under administrative censoring at `tau`.
pub fn censoring_indicators(w1: f64, w2: f64, tau: Option<f64>) -> (bool, bool) {
    match tau {
        Some(tau) => (w1 <= tau, w1 + w2 <= tau),
        None => (true, true),
    }
}

struct Draws {
    x1: f64,
    treat1: f64,
    u1: f64,
    u2: f64,
    drift: f64,
    treat2: f64,
}

fn draw_subject(stream: &mut RngStream, drift_sd: f64) -> Draws {
    Draws {
        x1: stream.standard_normal(),
        treat1: stream.uniform(),
        u1: stream.uniform(),
        u2: stream.uniform(),
        drift: drift_sd * stream.standard_normal(),
        treat2: stream.uniform(),
    }
}

fn build_subject(cfg: &ScenarioConfig, d: &Draws, with_potential: bool) -> SubjectRecord {
    let x1 = d.x1;
    let x2 = if cfg.scenario.covariate_drift() {
        x1 + d.drift
    } else {
        x1
    };
    let z1 = d.treat1 < expit(cfg.alpha0 + cfg.alpha1 * x1);
    let z2 = if cfg.scenario.time_varying_treatment() {
        let zf = if z1 { 1.0 } else { 0.0 };
        d.treat2 < expit(cfg.gamma0 + cfg.gamma1 * x2 + cfg.gamma2 * zf)
    } else {
        z1
    };
    let lp = |z: bool, x: f64| if z { cfg.beta_c } else { 0.0 } + cfg.beta1 * x;
    let w1 = gen_gap_time(d.u1, lp(z1, x1), cfg.baseline_rate);
    let w2 = gen_gap_time(d.u2, lp(z2, x2), cfg.baseline_rate);
    let (delta1, delta2) = censoring_indicators(w1, w2, cfg.tau);
    let potential = with_potential.then(|| PotentialOutcomes {
        w1_treated: gen_gap_time(d.u1, lp(true, x1), cfg.baseline_rate),
        w1_control: gen_gap_time(d.u1, lp(false, x1), cfg.baseline_rate),
        w2_treated: gen_gap_time(d.u2, lp(true, x2), cfg.baseline_rate),
        w2_control: gen_gap_time(d.u2, lp(false, x2), cfg.baseline_rate),
    });
    SubjectRecord {
        x1,
        x2,
        z1,
        z2,
        w1,
        w2,
        delta1,
        delta2,
        potential,
    }
}

/// Simulates `config.n_subjects` observed subjects from `stream`.
pub fn gen_dataset(
    config: &ScenarioConfig,
    stream: &mut RngStream,
) -> Result<Vec<SubjectRecord>, ConfigError> {
    generate(config, stream, false)
}

/// Like [`gen_dataset`] but also records both potential outcomes of each gap
/// time, sharing each event's uniform draw across arms.
pub fn gen_potential_outcomes(
    config: &ScenarioConfig,
    stream: &mut RngStream,
) -> Result<Vec<SubjectRecord>, ConfigError> {
    generate(config, stream, true)
}

fn generate(
    config: &ScenarioConfig,
    stream: &mut RngStream,
    with_potential: bool,
) -> Result<Vec<SubjectRecord>, ConfigError> {
    config.validate()?;
    Ok((0..config.n_subjects)
        .map(|_| {
            let d = draw_subject(stream, config.drift_sd);
            build_subject(config, &d, with_potential)
        })
        .collect())
}

pub const DATASET_CSV_HEADER: [&str; 8] = ["x1", "x2", "z1", "z2", "w1", "w2", "delta1", "delta2"];

/// Writes subjects as CSV (`x1,x2,z1,z2,w1,w2,delta1,delta2`), binaries as 0/1
/// and reals at full round-trip precision.
pub fn write_dataset_csv<W: Write>(records: &[SubjectRecord], out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(DATASET_CSV_HEADER)?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for r in records {
        wtr.write_record([
            r.x1.to_string().as_str(),
            r.x2.to_string().as_str(),
            bit(r.z1),
            bit(r.z2),
            r.w1.to_string().as_str(),
            r.w2.to_string().as_str(),
            bit(r.delta1),
            bit(r.delta2),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn gap_time_inverse_transform() {
        assert!((gen_gap_time(E.recip(), 0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((gen_gap_time(E.recip(), 2f64.ln(), 1.0) - 0.5).abs() < 1e-15);
        assert!((gen_gap_time(E.recip(), 0.0, 4.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gap_time_has_unit_mean() {
        let mut s = RngStream::new(8, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| gen_gap_time(s.uniform(), 0.0, 1.0)).sum::<f64>() / n as f64;
        assert!((0.997..=1.003).contains(&mean), "mean {mean}");
    }

    #[test]
    fn prevalence_intercepts() {
        let c = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 10)
            .with_prevalence(0.5)
            .unwrap();
        assert_eq!(c.gamma0, -0.1);
        assert_eq!(c.alpha0, ALPHA0_PREVALENCE_25);
        let c = ScenarioConfig::new(Scenario::TVCovariates, 10).with_prevalence(0.5).unwrap();
        assert_eq!(c.alpha0, 0.0);
        assert!(ScenarioConfig::new(Scenario::TVCovariates, 10).with_prevalence(0.3).is_err());
    }

    #[test]
    fn config_validation() {
        let base = ScenarioConfig::new(Scenario::IndependentGaps, 10);
        assert_eq!(
            ScenarioConfig { n_subjects: 1, ..base }.validate(),
            Err(ConfigError::TooFewSubjects(1))
        );
        assert!(ScenarioConfig { baseline_rate: 0.0, ..base }.validate().is_err());
        assert!(ScenarioConfig { drift_sd: -4.0, ..base }.validate().is_err());
        assert_eq!(base.with_tau(Some(-1.0)).validate(), Err(ConfigError::Tau(-1.0)));
        assert!(ScenarioConfig { beta_c: f64::NAN, ..base }.validate().is_err());
    }

    #[test]
    fn fixed_treatment_scenarios_keep_z() {
        let cfg = ScenarioConfig::new(Scenario::TVCovariates, 500).with_beta_c(0.5);
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert!(data.iter().all(|r| r.z1 == r.z2));
        let cfg = ScenarioConfig::new(Scenario::IndependentGaps, 500);
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert!(data.iter().all(|r| r.x1 == r.x2 && r.z1 == r.z2));
    }

    #[test]
    fn uncensored_indicators_are_all_one() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 200);
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        assert!(data.iter().all(|r| r.delta1 && r.delta2));
        assert!(data.iter().all(|r| r.potential.is_none()));
    }

    #[test]
    fn csv_export_layout() {
        let cfg = ScenarioConfig::new(Scenario::TVTreatmentCovariates, 3).with_tau(Some(1.0));
        let data = gen_dataset(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,z1,z2,w1,w2,delta1,delta2");
        assert_eq!(lines.len(), 4);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first.len(), 8);
        assert_eq!(first[0].parse::<f64>().unwrap(), data[0].x1);
        assert_eq!(first[4].parse::<f64>().unwrap(), data[0].w1);
    }
}
