//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and one `<var>.f32` file per
//! variable. Each binary file is exactly `T·N·M` little-endian IEEE-754
//! single-precision values in `[t][i][j]` row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datagen::{CausalDataset, DiffusionParams, InterventionSpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Role, SpatioTemporalField};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VARIABLES: [&str; 5] = ["X", "Z", "Y", "X_cf", "Y_cf"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub grid: GridSpec,
    pub params: DiffusionParams,
    pub intervention: InterventionSpec,
    pub seed: u64,
    pub interference: bool,
    pub variables: Vec<String>,
}

impl DatasetManifest {
    pub fn for_dataset(dataset: &CausalDataset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grid: dataset.grid,
            params: dataset.params.clone(),
            intervention: dataset.intervention.clone(),
            seed: dataset.seed,
            interference: dataset.params.interference,
            variables: VARIABLES.iter().map(|v| v.to_string()).collect(),
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    // check the version before the full schema so old files report clearly
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: path.clone(),
        source,
    })?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            expected: SCHEMA_VERSION,
            found,
        });
    }
    serde_json::from_value(raw).map_err(|source| Error::Manifest { path, source })
}

/// Writes little-endian f32 values to `path`.
pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads exactly `expected_len` little-endian f32 values from `path`.
pub fn read_f32_file(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let expected = (expected_len * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn variable_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.f32"))
}

pub fn write_dataset(dataset: &CausalDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    for (name, field) in dataset.fields() {
        let values = field.values.as_standard_layout();
        write_f32_file(&variable_path(dir, name), values.as_slice().expect("standard layout"))?;
    }
    let manifest = DatasetManifest::for_dataset(dataset);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Manifest {
        path: dir.join(MANIFEST_FILE),
        source,
    })?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<CausalDataset> {
    let manifest = read_manifest(dir)?;
    manifest.grid.validate()?;
    manifest.intervention.validate(&manifest.grid)?;
    for required in VARIABLES {
        if !manifest.variables.iter().any(|v| v == required) {
            return Err(Error::validation(format!("manifest does not list variable {required}")));
        }
    }
    let grid = manifest.grid;
    let load = |name: &str, role: Role| -> Result<SpatioTemporalField> {
        let data = read_f32_file(&variable_path(dir, name), grid.len())?;
        let values = Array3::from_shape_vec(grid.shape(), data).expect("length checked");
        Ok(SpatioTemporalField::new(role, values))
    };
    Ok(CausalDataset {
        grid,
        x: load("X", Role::Treatment)?,
        z: load("Z", Role::Covariate)?,
        y: load("Y", Role::Outcome)?,
        x_cf: load("X_cf", Role::Treatment)?,
        y_cf: load("Y_cf", Role::Outcome)?,
        params: manifest.params,
        intervention: manifest.intervention,
        seed: manifest.seed,
    })
}
