//! Experiment configuration: a JSON document where every block falls back
//! to defaults, so `{}` describes the default experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stci::datagen::{DiffusionParams, InterventionSpec};
use stci::grid::{GridSpec, RegionMask};
use stci::stcinet::ModelConfig;

use crate::CliError;

/// Steps used by `train` and `ablate` unless `--full` is given.
pub const DESK_SCALE_STEPS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub steps: usize,
    pub lag: usize,
    pub params: DiffusionParams,
    pub update_factor: f64,
    /// `i0:i1,j0:j1`, half-open.
    pub region: String,
    pub start_step: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            n_rows: grid.n_rows,
            n_cols: grid.n_cols,
            steps: grid.n_steps,
            lag: grid.lag,
            params: DiffusionParams::default(),
            update_factor: 0.6,
            region: "10:15,10:15".into(),
            start_step: 0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn grid(&self) -> Result<GridSpec, CliError> {
        Ok(GridSpec::new(self.n_rows, self.n_cols, self.steps, self.lag)?)
    }

    pub fn intervention(&self, grid: &GridSpec) -> Result<InterventionSpec, CliError> {
        let region = parse_region(&self.region, grid.n_rows, grid.n_cols)?;
        Ok(InterventionSpec::new(region, self.update_factor, self.start_step)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub out_dir: Option<PathBuf>,
    /// Intervention steps drawn as heatmap panels.
    pub heatmap_panels: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            heatmap_panels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Existing dataset directory; when absent, commands that need data
    /// take `--dataset` or generate from `generation`.
    pub dataset: Option<PathBuf>,
    pub generation: GenerationConfig,
    pub model: ModelConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
    }
}

/// Parses `i0:i1,j0:j1` into a half-open rectangular region.
pub fn parse_region(text: &str, n_rows: usize, n_cols: usize) -> Result<RegionMask, CliError> {
    let bad = || CliError::Validation(format!("region {text:?} is not of the form i0:i1,j0:j1"));
    let (rows, cols) = text.split_once(',').ok_or_else(bad)?;
    let range = |part: &str| -> Result<std::ops::Range<usize>, CliError> {
        let (a, b) = part.trim().split_once(':').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        Ok(a..b)
    };
    Ok(RegionMask::rect(n_rows, n_cols, range(rows)?, range(cols)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_experiment() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.generation.steps, 4000);
        assert_eq!(c.model.epochs, 60);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {"epoch": 1}}"#).is_err());
    }

    #[test]
    fn nested_overrides_keep_other_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"generation": {"steps": 50, "params": {"beta2": 0.0}}, "model": {"variant": "sa"}}"#)
                .unwrap();
        assert_eq!(c.generation.steps, 50);
        assert_eq!(c.generation.params.beta2, 0.0);
        assert_eq!(c.generation.params.alpha, 0.5);
        assert_eq!(c.model.variant, stci::stcinet::Variant::Sa);
        assert_eq!(c.model.batch_size, 64);
    }

    #[test]
    fn region_parsing() {
        let r = parse_region("10:15,10:15", 32, 32).unwrap();
        assert_eq!(r.treated_count(), 25);
        assert!(r.contains(10, 14) && !r.contains(15, 10));
        assert!(parse_region("10-15,10:15", 32, 32).is_err());
        assert!(parse_region("10:15", 32, 32).is_err());
        assert!(parse_region("30:40,0:2", 32, 32).is_err());
    }
}
