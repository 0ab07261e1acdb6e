//! Monte Carlo replication: generate, weight and fit each replicate, then
//! aggregate bias and standard errors across replicates.
//!
//! Without censoring every gap time is analysed over all subjects with its
//! stabilized treatment weight. Under administrative censoring at `tau` the
//! first gap is right-censored at `tau` over all subjects. The second gap is
//! analysed among subjects whose first event was observed, right-censored at
//! the remaining follow-up `tau - w1`, with treatment weights re-fitted on
//! that subset and multiplied by the first-gap censoring weight.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::CalibrationEntry;
use crate::coxfit::{fit_weighted_cox, CoxError, CoxFit, SurvivalSample};
use crate::iptw::{build_censoring_weights, build_treatment_weights, truncate_weights, WeightError};
use crate::simgen::{gen_dataset, ConfigError, Scenario, ScenarioConfig, SubjectRecord};
use crate::statcore::{substream_seed, RngStream};

/// Replicate-failure fraction above which a simulation aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
pub const THREADS_ENV: &str = "RECURWEIGHT_THREADS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplicateError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("{estimand} fit: {source}")]
    Cox {
        estimand: Estimand,
        #[source]
        source: CoxError,
    },
    #[error("{0} fit produced a non-finite or nonpositive value")]
    NonFinite(Estimand),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("no successful replicates to summarize")]
    Empty,
    #[error("number of replicates must be positive")]
    NoReplicates,
    #[error("{failed} of {n_reps} replicates failed (limit {limit:.0}%); first failure: {first}", limit = MAX_FAILURE_FRACTION * 100.0)]
    TooManyFailures {
        failed: usize,
        n_reps: usize,
        first: String,
    },
    #[error("{THREADS_ENV} must be a positive integer, got `{0}`")]
    Threads(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Which fitted coefficient a summary describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    Event1,
    Event2,
    /// Both gap times stacked in one fit, clustered by subject.
    Pooled,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimand::Event1 => "event-1",
            Estimand::Event2 => "event-2",
            Estimand::Pooled => "pooled",
        })
    }
}

impl Estimand {
    /// True marginal log HR of this estimand. Without covariate drift both
    /// gap times share one distribution, so the second gap's truth is `beta_m1`.
    pub fn truth(self, entry: &CalibrationEntry, scenario: Scenario) -> f64 {
        match self {
            Estimand::Event1 | Estimand::Pooled => entry.beta_m1,
            Estimand::Event2 if scenario.covariate_drift() => entry.beta_m2,
            Estimand::Event2 => entry.beta_m1,
        }
    }

    /// The estimand reported in single-row tables.
    pub fn headline(scenario: Scenario) -> Self {
        match scenario {
            Scenario::IndependentGaps => Estimand::Pooled,
            _ => Estimand::Event2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub beta_hat: f64,
    pub naive_se: f64,
    pub robust_se: f64,
}

impl From<CoxFit> for EventEstimate {
    fn from(f: CoxFit) -> Self {
        Self {
            beta_hat: f.log_hr,
            naive_se: f.naive_se,
            robust_se: f.robust_se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub event1: EventEstimate,
    pub event2: EventEstimate,
    /// Present for the independent-gaps scenario only.
    pub pooled: Option<EventEstimate>,
    pub replicate_seed: u64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl ReplicateResult {
    pub fn estimate(&self, estimand: Estimand) -> Option<&EventEstimate> {
        match estimand {
            Estimand::Event1 => Some(&self.event1),
            Estimand::Event2 => Some(&self.event2),
            Estimand::Pooled => self.pooled.as_ref(),
        }
    }
}

fn fit(estimand: Estimand, sample: &SurvivalSample) -> Result<EventEstimate, ReplicateError> {
    let est: EventEstimate = fit_weighted_cox(sample)
        .map_err(|source| ReplicateError::Cox { estimand, source })?
        .into();
    let ok = est.beta_hat.is_finite()
        && est.naive_se.is_finite()
        && est.robust_se.is_finite()
        && est.naive_se > 0.0
        && est.robust_se > 0.0;
    if ok {
        Ok(est)
    } else {
        Err(ReplicateError::NonFinite(estimand))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn extremes(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn record_weights(diag: &mut BTreeMap<String, f64>, name: &str, w: &[f64]) {
    let (lo, hi) = extremes(w);
    diag.insert(format!("mean_{name}"), mean(w));
    diag.insert(format!("min_{name}"), lo);
    diag.insert(format!("max_{name}"), hi);
}

fn fraction(data: &[SubjectRecord], pred: impl Fn(&SubjectRecord) -> bool) -> f64 {
    data.iter().filter(|r| pred(r)).count() as f64 / data.len() as f64
}

/// Simulates and analyses one dataset drawn from `replicate_seed`.
pub fn run_replicate(
    config: &ScenarioConfig,
    replicate_seed: u64,
) -> Result<ReplicateResult, ReplicateError> {
    let mut stream = RngStream::new(replicate_seed, 0);
    let data = gen_dataset(config, &mut stream)?;
    analyse(config, &data, replicate_seed)
}

/// Runs the weighting and fitting pipeline on an existing dataset.
pub fn analyse(
    config: &ScenarioConfig,
    data: &[SubjectRecord],
    replicate_seed: u64,
) -> Result<ReplicateResult, ReplicateError> {
    let scenario = config.scenario;
    let tw = build_treatment_weights(data, scenario)?;
    let mut diag = BTreeMap::new();
    diag.insert("prevalence_z1".into(), fraction(data, |r| r.z1));
    diag.insert("prevalence_z2".into(), fraction(data, |r| r.z2));
    record_weights(&mut diag, "sw1", &tw.sw1);
    record_weights(&mut diag, "sw2", &tw.sw2);

    let z2 = |r: &SubjectRecord| if scenario.time_varying_treatment() { r.z2 } else { r.z1 };
    let n = data.len();

    let (mut event1_sample, mut event2_sample) = match config.tau {
        None => {
            let mut s1 = SurvivalSample::with_capacity(n);
            let mut s2 = SurvivalSample::with_capacity(n);
            for (i, r) in data.iter().enumerate() {
                s1.push(r.w1, true, r.z1, tw.sw1[i], i);
                s2.push(r.w2, true, z2(r), tw.sw2[i], i);
            }
            (s1, s2)
        }
        Some(tau) => {
            let cw = build_censoring_weights(data, tau)?;
            diag.insert("censored_fraction_1".into(), fraction(data, |r| !r.delta1));
            diag.insert("censored_fraction_2".into(), fraction(data, |r| !r.delta2));

            let mut s1 = SurvivalSample::with_capacity(n);
            for (i, r) in data.iter().enumerate() {
                s1.push(r.w1.min(tau), r.delta1, r.z1, tw.sw1[i], i);
            }

            let observed: Vec<usize> = (0..n).filter(|&i| data[i].delta1).collect();
            let subset: Vec<SubjectRecord> = observed.iter().map(|&i| data[i]).collect();
            let sub_tw = build_treatment_weights(&subset, scenario)?;
            let observed_dag: Vec<f64> = observed.iter().map(|&i| cw.sw1_dag[i]).collect();
            record_weights(&mut diag, "sw1_dag", &observed_dag);
            let mut s2 = SurvivalSample::with_capacity(subset.len());
            for (k, &i) in observed.iter().enumerate() {
                let r = &data[i];
                let time = r.w2.min(tau - r.w1);
                s2.push(time, r.delta2, z2(r), sub_tw.sw2[k] * cw.sw1_dag[i], i);
            }
            (s1, s2)
        }
    };

    if let Some(p) = config.truncate_percentile {
        truncate_weights(&mut event1_sample.weight, p)?;
        truncate_weights(&mut event2_sample.weight, p)?;
    }

    let event1 = fit(Estimand::Event1, &event1_sample)?;
    let event2 = fit(Estimand::Event2, &event2_sample)?;
    let pooled = match scenario {
        Scenario::IndependentGaps => {
            let mut stacked = event1_sample;
            for i in 0..event2_sample.len() {
                stacked.push(
                    event2_sample.time[i],
                    event2_sample.event[i],
                    event2_sample.treatment[i],
                    event2_sample.weight[i],
                    event2_sample.cluster[i],
                );
            }
            Some(fit(Estimand::Pooled, &stacked)?)
        }
        _ => None,
    };

    Ok(ReplicateResult {
        event1,
        event2,
        pooled,
        replicate_seed,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasKind {
    /// `(mean - truth) / truth * 100`.
    Percent,
    /// `mean - truth`, used when the truth is zero.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimand: Estimand,
    pub true_beta_m: f64,
    pub true_hr: f64,
    pub mean_beta_hat: f64,
    pub mean_hr: f64,
    pub bias: f64,
    pub bias_kind: BiasKind,
    pub ase: f64,
    /// Root mean squared deviation from the truth with an `R - 1` divisor;
    /// `None` with fewer than two replicates.
    pub ese: Option<f64>,
    /// Sample standard deviation of the estimates.
    pub ese_centered: Option<f64>,
    pub rse: f64,
    pub n_subjects: usize,
    pub n_reps: usize,
    pub n_failed: usize,
}

impl SummaryRow {
    /// Percentage bias, when defined.
    pub fn bias_pct(&self) -> Option<f64> {
        (self.bias_kind == BiasKind::Percent).then_some(self.bias)
    }
}

/// Aggregates successful replicates for one estimand against `true_beta_m`.
pub fn summarize(
    results: &[ReplicateResult],
    true_beta_m: f64,
    estimand: Estimand,
    n_subjects: usize,
) -> Result<SummaryRow, HarnessError> {
    let est: Vec<&EventEstimate> = results.iter().filter_map(|r| r.estimate(estimand)).collect();
    if est.is_empty() {
        return Err(HarnessError::Empty);
    }
    let r = est.len() as f64;
    let mean_beta_hat = est.iter().map(|e| e.beta_hat).sum::<f64>() / r;
    let ase = est.iter().map(|e| e.naive_se).sum::<f64>() / r;
    let rse = est.iter().map(|e| e.robust_se).sum::<f64>() / r;
    let (ese, ese_centered) = if est.len() >= 2 {
        let ss = |c: f64| est.iter().map(|e| (e.beta_hat - c).powi(2)).sum::<f64>();
        (
            Some((ss(true_beta_m) / (r - 1.0)).sqrt()),
            Some((ss(mean_beta_hat) / (r - 1.0)).sqrt()),
        )
    } else {
        (None, None)
    };
    let (bias, bias_kind) = if true_beta_m == 0.0 {
        (mean_beta_hat, BiasKind::Absolute)
    } else {
        ((mean_beta_hat - true_beta_m) / true_beta_m * 100.0, BiasKind::Percent)
    };
    Ok(SummaryRow {
        estimand,
        true_beta_m,
        true_hr: true_beta_m.exp(),
        mean_beta_hat,
        mean_hr: mean_beta_hat.exp(),
        bias,
        bias_kind,
        ase,
        ese,
        ese_centered,
        rse,
        n_subjects,
        n_reps: est.len(),
        n_failed: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    /// Rows for event 1, event 2 and (independent gaps only) the pooled fit.
    pub rows: Vec<SummaryRow>,
    pub n_reps: usize,
    pub n_failed: usize,
    /// Replicate diagnostics averaged over successful replicates.
    pub diagnostics: BTreeMap<String, f64>,
    pub results: Vec<ReplicateResult>,
}

impl SimulationOutput {
    pub fn row(&self, estimand: Estimand) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimand == estimand)
    }
}

/// Worker count from `RECURWEIGHT_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>, HarnessError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(HarnessError::Threads(v)),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `n_reps` replicates in parallel, capped by `RECURWEIGHT_THREADS`.
pub fn run_simulation(
    config: &ScenarioConfig,
    truth: &CalibrationEntry,
    n_reps: usize,
    master_seed: u64,
) -> Result<SimulationOutput, HarnessError> {
    run_simulation_with_threads(config, truth, n_reps, master_seed, threads_from_env()?)
}

/// Like [`run_simulation`] with an explicit worker count (`None` for rayon's default).
pub fn run_simulation_with_threads(
    config: &ScenarioConfig,
    truth: &CalibrationEntry,
    n_reps: usize,
    master_seed: u64,
    threads: Option<usize>,
) -> Result<SimulationOutput, HarnessError> {
    if n_reps == 0 {
        return Err(HarnessError::NoReplicates);
    }
    let config = config.with_beta_c(truth.beta_c);
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;

    let outcomes: Vec<Result<ReplicateResult, ReplicateError>> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .map(|j| run_replicate(&config, substream_seed(master_seed, j as u64)))
            .collect()
    });

    let mut results = Vec::with_capacity(n_reps);
    let mut first_failure = None;
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(e) => {
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let n_failed = n_reps - results.len();
    if n_failed as f64 > MAX_FAILURE_FRACTION * n_reps as f64 || results.is_empty() {
        return Err(HarnessError::TooManyFailures {
            failed: n_failed,
            n_reps,
            first: first_failure.unwrap_or_default(),
        });
    }

    let mut estimands = vec![Estimand::Event1, Estimand::Event2];
    if config.scenario == Scenario::IndependentGaps {
        estimands.push(Estimand::Pooled);
    }
    let rows = estimands
        .into_iter()
        .map(|e| {
            let mut row = summarize(&results, e.truth(truth, config.scenario), e, config.n_subjects)?;
            row.n_reps = n_reps;
            row.n_failed = n_failed;
            Ok(row)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut diagnostics: BTreeMap<String, f64> = BTreeMap::new();
    for r in &results {
        for (k, v) in &r.diagnostics {
            *diagnostics.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    let m = results.len() as f64;
    diagnostics.values_mut().for_each(|v| *v /= m);

    Ok(SimulationOutput {
        rows,
        n_reps,
        n_failed,
        diagnostics,
        results,
    })
}
