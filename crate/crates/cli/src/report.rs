//! `report.json` schema and the tab-separated result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stci::datagen::CausalDataset;
use stci::effects::EffectEstimates;
use stci::stcinet::{EffectSummary, Evaluation, PerPixelPehe};

use crate::CliError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.tsv";

pub const AGGREGATION: &str = "sqrt-PEHE between oracle and predicted per-step region-mean effect series \
(DATE: treated region, IATE: untreated region, LATE: whole grid), averaged over all valid intervention steps; \
per_pixel_pehe scores individual pixels instead";

/// Every top-level key of `report.json`, in serialization order.
pub const REPORT_KEYS: [&str; 16] = [
    "schema_version",
    "model",
    "label",
    "parameter_count",
    "dataset",
    "aggregation",
    "date_pehe",
    "iate_pehe",
    "late_pehe",
    "rmse",
    "oracle_effects",
    "predicted_effects",
    "per_pixel_pehe",
    "lag",
    "first_step",
    "effect_steps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub path: Option<PathBuf>,
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_steps: usize,
    pub interference: bool,
    pub update_factor: f64,
    pub intervention_start: usize,
    pub seed: u64,
}

impl DatasetInfo {
    pub fn new(dataset: &CausalDataset, path: Option<&Path>) -> Self {
        Self {
            path: path.map(Path::to_path_buf),
            n_rows: dataset.grid.n_rows,
            n_cols: dataset.grid.n_cols,
            n_steps: dataset.grid.n_steps,
            interference: dataset.params.interference,
            update_factor: dataset.intervention.update_factor,
            intervention_start: dataset.intervention.start_step,
            seed: dataset.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    /// Variant name, or `oracle` for the ground-truth predictor.
    pub model: String,
    pub label: String,
    pub parameter_count: usize,
    pub dataset: DatasetInfo,
    pub aggregation: String,
    pub date_pehe: f64,
    pub iate_pehe: f64,
    pub late_pehe: f64,
    pub rmse: f64,
    pub oracle_effects: EffectSummary,
    pub predicted_effects: EffectSummary,
    pub per_pixel_pehe: PerPixelPehe,
    pub lag: usize,
    pub first_step: usize,
    pub effect_steps: usize,
}

impl Report {
    pub fn new(model: &str, label: &str, parameter_count: usize, dataset: DatasetInfo, eval: &Evaluation) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            model: model.to_string(),
            label: label.to_string(),
            parameter_count,
            dataset,
            aggregation: AGGREGATION.to_string(),
            date_pehe: eval.date_pehe,
            iate_pehe: eval.iate_pehe,
            late_pehe: eval.late_pehe,
            rmse: eval.rmse,
            oracle_effects: eval.oracle,
            predicted_effects: eval.predicted,
            per_pixel_pehe: eval.per_pixel_pehe,
            lag: eval.lag,
            first_step: eval.first_step,
            effect_steps: eval.effect_steps,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{} is not a valid report: {e}", path.display())))
    }
}

/// Per-step oracle and predicted region-mean effects as CSV.
pub fn effect_curves_csv(oracle: &EffectEstimates, predicted: &EffectEstimates) -> String {
    let series = [
        oracle.date_series(),
        predicted.date_series(),
        oracle.iate_series(),
        predicted.iate_series(),
        oracle.late_series(),
        predicted.late_series(),
    ];
    let mut out = String::from("step,oracle_date,predicted_date,oracle_iate,predicted_iate,oracle_late,predicted_late\n");
    for k in 0..series[0].len() {
        write!(out, "{}", oracle.first_step + k).unwrap();
        for s in &series {
            write!(out, ",{}", s[k]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// One row of a results table; `metrics` is absent when the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub label: String,
    pub parameter_count: Option<usize>,
    pub metrics: Option<[f64; 4]>,
    pub status: String,
}

impl TableRow {
    pub fn from_report(report: &Report) -> Self {
        Self {
            model: report.model.clone(),
            label: report.label.clone(),
            parameter_count: Some(report.parameter_count),
            metrics: Some([report.date_pehe, report.iate_pehe, report.late_pehe, report.rmse]),
            status: "ok".into(),
        }
    }
}

pub const TABLE_HEADER: [&str; 8] = [
    "model",
    "label",
    "parameter_count",
    "date_pehe",
    "iate_pehe",
    "late_pehe",
    "rmse",
    "status",
];

/// Tab-separated table; failed rows carry `NaN` metrics and the error in `status`.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = TABLE_HEADER.join("\t");
    out.push('\n');
    for row in rows {
        let count = row.parameter_count.map_or_else(|| "NA".to_string(), |c| c.to_string());
        let metrics = row.metrics.unwrap_or([f64::NAN; 4]);
        let status = row.status.replace(['\t', '\n'], " ");
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            row.model, row.label, count, metrics[0], metrics[1], metrics[2], metrics[3], status
        )
        .unwrap();
    }
    out
}

/// Collects `report.json` files: explicit files, or directories searched recursively.
pub fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    for input in inputs {
        if input.is_dir() {
            walk(input, &mut found)?;
        } else if input.is_file() {
            found.push(input.clone());
        } else {
            return Err(CliError::Core(stci::Error::MissingFile(input.clone())));
        }
    }
    Ok(found)
}

fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == REPORT_FILE) {
            found.push(path);
        }
    }
    Ok(())
}
