use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_file, write_f32_file};
use crate::nn::Collection;

use super::data::Normalizer;
use super::train::{EpochRecord, TrainedModel};
use super::ModelConfig;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    collection: Collection,
    shape: [usize; 4],
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelManifest {
    schema_version: u32,
    config: ModelConfig,
    n_rows: usize,
    n_cols: usize,
    normalizer: Normalizer,
    parameter_count: usize,
    parameters: Vec<ParamEntry>,
    training_log: Vec<EpochRecord>,
}

fn blob_path(dir: &Path, collection: Collection) -> PathBuf {
    dir.join(format!("params_{}.f32", collection.name()))
}

impl TrainedModel {
    /// Writes `model.json` and one `params_<collection>.f32` blob per collection.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (n_rows, n_cols) = self.grid();
        let manifest = ModelManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            n_rows,
            n_cols,
            normalizer: self.normalizer,
            parameter_count: self.parameter_count(),
            parameters: self
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    collection: p.collection,
                    shape: p.value.shape(),
                    trainable: p.trainable,
                })
                .collect(),
            training_log: self.training_log.clone(),
        };
        let path = dir.join(MODEL_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Manifest {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, json)?;
        for collection in Collection::ALL {
            write_f32_file(&blob_path(dir, collection), &self.store.flatten(collection))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Manifest {
            path: path.clone(),
            source,
        })?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found,
            });
        }
        let manifest: ModelManifest = serde_json::from_value(value).map_err(|source| Error::Manifest {
            path: path.clone(),
            source,
        })?;
        let mut model = TrainedModel::init(&manifest.config, manifest.n_rows, manifest.n_cols, manifest.normalizer)?;
        let layout: Vec<ParamEntry> = model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                collection: p.collection,
                shape: p.value.shape(),
                trainable: p.trainable,
            })
            .collect();
        if layout != manifest.parameters {
            return Err(Error::config(format!(
                "checkpoint parameter layout in {} does not match the configured architecture",
                path.display()
            )));
        }
        for collection in Collection::ALL {
            let expected: usize = layout
                .iter()
                .filter(|p| p.collection == collection)
                .map(|p| p.shape.iter().product::<usize>())
                .sum();
            let values = read_f32_file(&blob_path(dir, collection), expected)?;
            let loaded = model.store.load_flat(collection, &values);
            debug_assert!(loaded);
        }
        model.training_log = manifest.training_log;
        Ok(model)
    }
}
