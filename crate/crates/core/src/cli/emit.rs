use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OutputFormat, RunManifest};
use crate::calibrate::CalibrationEntry;
use crate::harness::{BiasKind, Estimand, SummaryRow};

pub const SIMULATION_COLUMNS: [&str; 15] = [
    "scenario",
    "prevalence",
    "tau",
    "true_log_hr",
    "true_hr",
    "est_log_hr",
    "est_hr",
    "bias_pct",
    "ase",
    "ese",
    "rse",
    "n",
    "reps",
    "seed",
    "failed",
];

pub const CALIBRATION_COLUMNS: [&str; 5] = ["true_hr_1", "beta_m1", "beta_c", "beta_m2", "true_hr_2"];

const MANIFEST_TAG: &str = "manifest:";

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("nothing to emit")]
    NoRows,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}: no embedded manifest found")]
    NoManifest(String),
}

/// Renders a real at the table precision.
pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt4)
}

/// One line of a simulation results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub scenario: String,
    pub prevalence: f64,
    pub tau: Option<f64>,
    pub estimand: Estimand,
    pub beta_c: f64,
    pub true_log_hr: f64,
    pub true_hr: f64,
    pub est_log_hr: f64,
    pub est_hr: f64,
    pub bias: f64,
    pub bias_kind: BiasKind,
    pub ase: f64,
    pub ese: Option<f64>,
    pub ese_centered: Option<f64>,
    pub rse: f64,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub failed: usize,
}

impl SimulationRow {
    pub fn new(
        summary: &SummaryRow,
        scenario: &str,
        prevalence: f64,
        tau: Option<f64>,
        beta_c: f64,
        seed: u64,
    ) -> Self {
        Self {
            scenario: scenario.to_string(),
            prevalence,
            tau,
            estimand: summary.estimand,
            beta_c,
            true_log_hr: summary.true_beta_m,
            true_hr: summary.true_hr,
            est_log_hr: summary.mean_beta_hat,
            est_hr: summary.mean_hr,
            bias: summary.bias,
            bias_kind: summary.bias_kind,
            ase: summary.ase,
            ese: summary.ese,
            ese_centered: summary.ese_centered,
            rse: summary.rse,
            n: summary.n_subjects,
            reps: summary.n_reps,
            seed,
            failed: summary.n_failed,
        }
    }

    /// Percent bias, or `abs:` followed by the absolute bias for null rows.
    fn bias_cell(&self) -> String {
        match self.bias_kind {
            BiasKind::Percent => fmt4(self.bias),
            BiasKind::Absolute => format!("abs:{}", fmt4(self.bias)),
        }
    }
}

/// A row type with CSV and markdown renderings.
pub trait TableRow: Serialize + DeserializeOwned {
    fn columns() -> &'static [&'static str];
    fn md_columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<String>;
    fn md_cells(&self) -> Vec<String> {
        self.cells()
    }
}

impl TableRow for SimulationRow {
    fn columns() -> &'static [&'static str] {
        &SIMULATION_COLUMNS
    }

    fn md_columns() -> &'static [&'static str] {
        &[
            "Scenario", "Prevalence", "τ", "True log HR", "True HR", "Est. log HR", "Est. HR",
            "Bias (%)", "ASE", "ESE", "RSE", "n", "Reps", "Seed", "Failed",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.scenario.clone(),
            format!("{}", self.prevalence),
            self.tau.map_or_else(String::new, |t| format!("{t}")),
            fmt4(self.true_log_hr),
            fmt4(self.true_hr),
            fmt4(self.est_log_hr),
            fmt4(self.est_hr),
            self.bias_cell(),
            fmt4(self.ase),
            fmt_opt(self.ese),
            fmt4(self.rse),
            self.n.to_string(),
            self.reps.to_string(),
            self.seed.to_string(),
            self.failed.to_string(),
        ]
    }

    fn md_cells(&self) -> Vec<String> {
        let mut c = self.cells();
        c[2] = self.tau.map_or_else(|| "∞".to_string(), |t| format!("{t}"));
        c[7] = match self.bias_kind {
            BiasKind::Percent => format!("{}%", fmt4(self.bias)),
            BiasKind::Absolute => format!("{} (abs)", fmt4(self.bias)),
        };
        c
    }
}

impl TableRow for CalibrationEntry {
    fn columns() -> &'static [&'static str] {
        &CALIBRATION_COLUMNS
    }

    fn md_columns() -> &'static [&'static str] {
        &["Marginal HR (W1)", "β^m1", "β^c", "β^m2", "Marginal HR (W2)"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt4(self.hr_m1()),
            fmt4(self.beta_m1),
            fmt4(self.beta_c),
            fmt4(self.beta_m2),
            fmt4(self.hr_m2()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonDocument<R, X = serde_json::Value> {
    pub manifest: RunManifest,
    pub rows: Vec<R>,
    /// Additional per-run detail (all estimands, diagnostics).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<X>,
}

fn manifest_line(manifest: &RunManifest) -> Result<String, EmitError> {
    Ok(format!("{MANIFEST_TAG} {}", serde_json::to_string(manifest)?))
}

/// Renders `rows` with the manifest embedded as header comments (CSV), an
/// HTML comment (markdown) or a top-level field (JSON).
pub fn render_table<R: TableRow>(
    manifest: &RunManifest,
    rows: &[R],
    format: OutputFormat,
    extra: Option<serde_json::Value>,
) -> Result<String, EmitError> {
    if rows.is_empty() {
        return Err(EmitError::NoRows);
    }
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str(&format!("# {}\n", manifest_line(manifest)?));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(R::columns())?;
            for r in rows {
                w.write_record(r.cells())?;
            }
            let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
            out.push_str(&String::from_utf8_lossy(&bytes));
        }
        OutputFormat::Md => {
            out.push_str(&format!("<!-- {} -->\n\n", manifest_line(manifest)?));
            let line = |cells: Vec<String>| format!("| {} |\n", cells.join(" | "));
            out.push_str(&line(R::md_columns().iter().map(|s| s.to_string()).collect()));
            out.push_str(&line(R::md_columns().iter().map(|_| "---".to_string()).collect()));
            for r in rows {
                out.push_str(&line(r.md_cells()));
            }
        }
        OutputFormat::Json => {
            let doc = JsonDocument {
                manifest: manifest.clone(),
                rows: rows.iter().map(serde_json::to_value).collect::<Result<Vec<_>, _>>()?,
                extra,
            };
            out.push_str(&serde_json::to_string_pretty(&doc)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes `text` to `path`, or to standard output when `path` is `None`.
pub fn write_output(text: &str, path: Option<&Path>) -> Result<(), EmitError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| EmitError::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| EmitError::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

/// Renders and writes a table; see [`render_table`].
pub fn emit_table<R: TableRow>(
    manifest: &RunManifest,
    rows: &[R],
    format: OutputFormat,
    path: Option<&Path>,
    extra: Option<serde_json::Value>,
) -> Result<(), EmitError> {
    write_output(&render_table(manifest, rows, format, extra)?, path)
}

/// Parses the rows of a JSON document produced by [`render_table`].
pub fn parse_json_rows<R: TableRow>(text: &str) -> Result<(RunManifest, Vec<R>), EmitError> {
    let doc: JsonDocument<R> = serde_json::from_str(text)?;
    Ok((doc.manifest, doc.rows))
}

/// Recovers the manifest embedded in any emitted file.
pub fn extract_manifest(text: &str, origin: &str) -> Result<RunManifest, EmitError> {
    if text.trim_start().starts_with('{') {
        #[derive(Deserialize)]
        struct Head {
            manifest: RunManifest,
        }
        return Ok(serde_json::from_str::<Head>(text)?.manifest);
    }
    for line in text.lines() {
        let body = line
            .strip_prefix("# ")
            .or_else(|| line.strip_prefix("<!-- ").and_then(|l| l.strip_suffix(" -->")));
        if let Some(json) = body.and_then(|b| b.strip_prefix(MANIFEST_TAG)) {
            return Ok(serde_json::from_str(json.trim())?);
        }
    }
    Err(EmitError::NoManifest(origin.to_string()))
}
