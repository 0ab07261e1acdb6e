//! Command-line front end: argument parsing, dispatch and table emission.

pub mod emit;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    cached_entry, calibrate_beta_c, calibrate_table, CalibrationEntry, DEFAULT_ORACLE_N,
    DEFAULT_TOLERANCE,
};
use crate::harness::{run_simulation, Estimand};
use crate::simgen::{gen_dataset, write_dataset_csv, Scenario, ScenarioConfig};
use crate::statcore::RngStream;
use emit::{emit_table, extract_manifest, write_output, SimulationRow};

pub const DEFAULT_TARGETS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Md,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Calibrate,
    Simulate,
    Generate,
}

/// Everything needed to reproduce one invocation; embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: CommandKind,
    /// Scenario parameters; `beta_c` is set per target from `calibration`
    /// when running.
    pub config: Option<ScenarioConfig>,
    pub prevalence: Option<f64>,
    pub target_hrs: Vec<f64>,
    pub n_reps: Option<usize>,
    pub master_seed: u64,
    pub oracle_n: usize,
    pub tolerance: f64,
    pub recalibrate: bool,
    pub output_format: OutputFormat,
    pub output_path: Option<PathBuf>,
    pub version: String,
}

#[derive(Debug, Parser)]
#[command(name = "recurweight", version, about = "Stabilized IPTW simulation engine for two-gap-time survival data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Map target marginal hazard ratios to conditional effects.
    Calibrate(CalibrateArgs),
    /// Run a Monte Carlo study and tabulate bias and standard errors.
    Simulate(SimulateArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
    /// Re-run the invocation recorded in a previously emitted file.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Target marginal hazard ratios for the first gap time.
    #[arg(long, value_delimiter = ',', value_parser = parse_hr, default_values_t = DEFAULT_TARGETS)]
    pub targets: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_N)]
    pub oracle_n: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE, value_parser = parse_positive)]
    pub tolerance: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long, default_value_t = 10_000, value_parser = parse_subjects)]
    pub n: usize,
    #[arg(long, default_value_t = 0.25, value_parser = parse_prevalence)]
    pub prevalence: f64,
    /// Administrative censoring time.
    #[arg(long, requires = "scenario", value_parser = parse_positive)]
    pub tau: Option<f64>,
    /// Cap analysis weights at this sample percentile (off by default).
    #[arg(long, value_parser = parse_percentile)]
    pub truncate: Option<f64>,
    /// Recompute calibration instead of using the cached table.
    #[arg(long)]
    pub recalibrate: bool,
    #[arg(long, default_value_t = DEFAULT_ORACLE_N)]
    pub oracle_n: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub reps: u64,
    /// Target marginal hazard ratios for the first gap time.
    #[arg(long, value_delimiter = ',', value_parser = parse_hr, default_values_t = DEFAULT_TARGETS)]
    pub target_hr: Vec<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1.0, value_parser = parse_hr)]
    pub target_hr: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A file previously written by this tool.
    pub file: PathBuf,
    /// Destination; defaults to the path recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn parse_percentile(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 100.0 => Ok(v),
        _ => Err(format!("percentile must lie in (0, 100], got `{s}`")),
    }
}

fn parse_hr(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v >= 1.0 && v.is_finite() => Ok(v),
        _ => Err(format!("hazard ratio must be a finite number >= 1, got `{s}`")),
    }
}

fn parse_prevalence(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v == 0.25 || v == 0.5 => Ok(v),
        _ => Err(format!("prevalence must be 0.25 or 0.5, got `{s}`")),
    }
}

fn parse_subjects(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        _ => Err(format!("need at least 2 subjects, got `{s}`")),
    }
}

fn scenario_config(a: &ScenarioArgs) -> anyhow::Result<ScenarioConfig> {
    let scenario = a.scenario.unwrap_or(Scenario::IndependentGaps);
    let cfg = ScenarioConfig::new(scenario, a.n)
        .with_prevalence(a.prevalence)?
        .with_tau(a.tau)
        .with_truncation(a.truncate);
    cfg.validate()?;
    Ok(cfg)
}

fn ascending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// What a parsed command line asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    Run(RunManifest),
    Replay { file: PathBuf, out: Option<PathBuf> },
}

/// Parses and validates a command line (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let invalid = |msg: String| clap::Error::raw(clap::error::ErrorKind::ValueValidation, msg + "\n");
    let manifest = match cli.command {
        Command::Calibrate(a) => RunManifest {
            command: CommandKind::Calibrate,
            config: None,
            prevalence: None,
            target_hrs: ascending(a.targets),
            n_reps: None,
            master_seed: a.output.seed,
            oracle_n: a.oracle_n,
            tolerance: a.tolerance,
            recalibrate: true,
            output_format: a.output.format,
            output_path: a.output.out,
            version: version(),
        },
        Command::Simulate(a) => RunManifest {
            command: CommandKind::Simulate,
            config: Some(scenario_config(&a.scenario).map_err(|e| invalid(e.to_string()))?),
            prevalence: Some(a.scenario.prevalence),
            target_hrs: ascending(a.target_hr),
            n_reps: Some(a.reps as usize),
            master_seed: a.output.seed,
            oracle_n: a.scenario.oracle_n,
            tolerance: DEFAULT_TOLERANCE,
            recalibrate: a.scenario.recalibrate,
            output_format: a.output.format,
            output_path: a.output.out,
            version: version(),
        },
        Command::Generate(a) => RunManifest {
            command: CommandKind::Generate,
            config: Some(scenario_config(&a.scenario).map_err(|e| invalid(e.to_string()))?),
            prevalence: Some(a.scenario.prevalence),
            target_hrs: vec![a.target_hr],
            n_reps: None,
            master_seed: a.seed,
            oracle_n: a.scenario.oracle_n,
            tolerance: DEFAULT_TOLERANCE,
            recalibrate: a.scenario.recalibrate,
            output_format: OutputFormat::Csv,
            output_path: a.out,
            version: version(),
        },
        Command::Replay(a) => {
            return Ok(Invocation::Replay {
                file: a.file,
                out: a.out,
            })
        }
    };
    Ok(Invocation::Run(manifest))
}

/// Calibration for one target HR: cached unless recalibration is requested
/// or the target is not in the cached table.
pub fn truth_for(manifest: &RunManifest, target_hr: f64) -> anyhow::Result<CalibrationEntry> {
    if !manifest.recalibrate {
        if let Some(e) = cached_entry(target_hr) {
            return Ok(e);
        }
    }
    let target = (target_hr.ln() * 1e4).round() / 1e4;
    calibrate_beta_c(target, manifest.tolerance, manifest.oracle_n, manifest.master_seed)
        .with_context(|| format!("calibrating target HR {target_hr}"))
}

/// Executes a manifest and writes its output.
pub fn execute(manifest: &RunManifest) -> anyhow::Result<()> {
    let out = manifest.output_path.as_deref();
    match manifest.command {
        CommandKind::Calibrate => {
            let rows = calibrate_table(
                &manifest.target_hrs,
                manifest.tolerance,
                manifest.oracle_n,
                manifest.master_seed,
            )?;
            emit_table(manifest, &rows, manifest.output_format, out, None)?;
        }
        CommandKind::Simulate => {
            let (rows, detail) = simulate(manifest)?;
            emit_table(manifest, &rows, manifest.output_format, out, Some(detail))?;
        }
        CommandKind::Generate => generate(manifest, out)?,
    }
    Ok(())
}

fn require_config(manifest: &RunManifest) -> anyhow::Result<ScenarioConfig> {
    manifest
        .config
        .context("manifest has no scenario configuration")
}

/// Runs one study per target HR. Returns the headline rows plus a JSON
/// value holding every estimand's row and the averaged diagnostics.
pub fn simulate(manifest: &RunManifest) -> anyhow::Result<(Vec<SimulationRow>, serde_json::Value)> {
    let cfg = require_config(manifest)?;
    let n_reps = manifest.n_reps.context("manifest has no replicate count")?;
    let prevalence = manifest.prevalence.unwrap_or(0.25);
    let headline = Estimand::headline(cfg.scenario);
    let mut rows = Vec::new();
    let mut detail = Vec::new();
    for &hr in &manifest.target_hrs {
        let truth = truth_for(manifest, hr)?;
        let output = run_simulation(&cfg, &truth, n_reps, manifest.master_seed)
            .with_context(|| format!("simulating target HR {hr}"))?;
        let all: Vec<SimulationRow> = output
            .rows
            .iter()
            .map(|s| SimulationRow::new(s, cfg.scenario.label(), prevalence, cfg.tau, truth.beta_c, manifest.master_seed))
            .collect();
        let head = all
            .iter()
            .find(|r| r.estimand == headline)
            .cloned()
            .context("headline estimand missing")?;
        rows.push(head);
        detail.push(serde_json::json!({
            "target_hr": hr,
            "calibration": truth,
            "estimands": all,
            "diagnostics": output.diagnostics,
        }));
    }
    Ok((rows, serde_json::Value::Array(detail)))
}

fn generate(manifest: &RunManifest, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = require_config(manifest)?;
    let hr = *manifest.target_hrs.first().context("no target HR")?;
    let truth = truth_for(manifest, hr)?;
    let cfg = cfg.with_beta_c(truth.beta_c);
    let data = gen_dataset(&cfg, &mut RngStream::new(manifest.master_seed, 0))?;
    let mut buf = format!("# manifest: {}\n", serde_json::to_string(manifest)?).into_bytes();
    write_dataset_csv(&data, &mut buf)?;
    write_output(&String::from_utf8(buf)?, out)?;
    Ok(())
}

/// Loads the manifest embedded in `file`, optionally redirecting output.
pub fn replay_manifest(file: &Path, out: Option<PathBuf>) -> anyhow::Result<RunManifest> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut manifest = extract_manifest(&text, &file.display().to_string())?;
    if out.is_some() {
        manifest.output_path = out;
    }
    if manifest.version != version() {
        bail!(
            "{} was written by version {}, this is {}",
            file.display(),
            manifest.version,
            version()
        );
    }
    Ok(manifest)
}

/// Entry point shared by the binary: parse, dispatch, report.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let manifest = match parse_args(argv) {
        Ok(Invocation::Run(m)) => m,
        Ok(Invocation::Replay { file, out }) => replay_manifest(&file, out)?,
        Err(e) => e.exit(),
    };
    execute(&manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::GAMMA0_PREVALENCE_50;

    fn manifest(args: &[&str]) -> RunManifest {
        let mut argv = vec!["recurweight"];
        argv.extend_from_slice(args);
        match parse_args(argv).unwrap() {
            Invocation::Run(m) => m,
            other => panic!("unexpected {other:?}"),
        }
    }

    fn usage_error(args: &[&str]) -> bool {
        let mut argv = vec!["recurweight"];
        argv.extend_from_slice(args);
        parse_args(argv).is_err()
    }

    #[test]
    fn simulate_manifest_sets_second_intercept() {
        let m = manifest(&[
            "simulate", "--scenario", "tv-treatment", "--prevalence", "0.5", "--target-hr", "2",
            "--n", "10000", "--reps", "1000", "--seed", "7",
        ]);
        let cfg = m.config.unwrap();
        assert_eq!(cfg.gamma0, GAMMA0_PREVALENCE_50);
        assert_eq!(cfg.scenario, Scenario::TVTreatmentCovariates);
        assert_eq!((m.n_reps, m.master_seed, m.target_hrs), (Some(1000), 7, vec![2.0]));
    }

    #[test]
    fn defaults_mirror_the_study() {
        let m = manifest(&["simulate"]);
        let cfg = m.config.unwrap();
        assert_eq!((cfg.n_subjects, m.n_reps), (10_000, Some(1_000)));
        assert_eq!(cfg.baseline_rate, 1.0);
        assert!((cfg.beta1 - 1.5f64.ln()).abs() < 1e-15);
        assert_eq!(m.prevalence, Some(0.25));
        assert_eq!(m.target_hrs, DEFAULT_TARGETS.to_vec());
    }

    #[test]
    fn calibrate_targets_are_sorted() {
        let m = manifest(&["calibrate", "--targets", "3,1,2.5,1.5,2"]);
        assert_eq!(m.target_hrs, DEFAULT_TARGETS.to_vec());
        assert_eq!(m.command, CommandKind::Calibrate);
    }

    #[test]
    fn usage_errors() {
        assert!(usage_error(&["simulate", "--tau", "-1"]));
        assert!(usage_error(&["simulate", "--tau", "1"]));
        assert!(usage_error(&["simulate", "--prevalence", "0.3"]));
        assert!(usage_error(&["simulate", "--reps", "0"]));
        assert!(usage_error(&["simulate", "--bogus"]));
        assert!(usage_error(&["calibrate", "--targets", "0.5"]));
        assert!(usage_error(&["simulate", "--format", "xml"]));
        assert!(usage_error(&["simulate", "--truncate", "101"]));
        assert!(!usage_error(&["simulate", "--scenario", "tv-treatment", "--tau", "0.25"]));
    }
}
