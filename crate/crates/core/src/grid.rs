//! Grid conventions and the field types shared by every module.
//!
//! All fields are indexed `[t][i][j]`: time first, then row, then column.
//! Time is 0-based, so a run of `T` steps occupies indices `0..T`.

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Shape of a spatiotemporal dataset plus the outcome lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "N")]
    pub n_rows: usize,
    #[serde(rename = "M")]
    pub n_cols: usize,
    #[serde(rename = "T")]
    pub n_steps: usize,
    pub lag: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_rows: 32,
            n_cols: 32,
            n_steps: 4000,
            lag: 1,
        }
    }
}

impl GridSpec {
    pub fn new(n_rows: usize, n_cols: usize, n_steps: usize, lag: usize) -> Result<Self> {
        let grid = Self {
            n_rows,
            n_cols,
            n_steps,
            lag,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.n_steps == 0 {
            return Err(Error::validation(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.n_steps, self.n_rows, self.n_cols
            )));
        }
        if self.lag == 0 || self.lag >= self.n_steps {
            return Err(Error::validation(format!(
                "lag must satisfy 1 <= lag < T, got lag={} T={}",
                self.lag, self.n_steps
            )));
        }
        Ok(())
    }

    /// Number of cells in one spatial slice (|ℕ| = N·M).
    pub fn cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_steps, self.n_rows, self.n_cols)
    }

    pub fn len(&self) -> usize {
        self.n_steps * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which causal variable a field holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Treatment,
    Covariate,
    Outcome,
}

/// One variable over the full `T×N×M` grid, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalField {
    pub role: Role,
    pub values: Array3<f32>,
}

impl SpatioTemporalField {
    pub fn zeros(role: Role, grid: &GridSpec) -> Self {
        Self {
            role,
            values: Array3::zeros(grid.shape()),
        }
    }

    pub fn new(role: Role, values: Array3<f32>) -> Self {
        Self { role, values }
    }

    pub fn n_steps(&self) -> usize {
        self.values.dim().0
    }

    pub fn slice(&self, t: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(ndarray::Axis(0), t)
    }

    pub fn check_shape(&self, grid: &GridSpec) -> Result<()> {
        if self.values.dim() != grid.shape() {
            return Err(Error::validation(format!(
                "{:?} field has shape {:?}, grid expects {:?}",
                self.role,
                self.values.dim(),
                grid.shape()
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "{:?} field contains non-finite values",
                self.role
            )));
        }
        Ok(())
    }
}

/// Boolean map of the treated region S; its complement is S′.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    mask: Array2<bool>,
}

impl RegionMask {
    /// Wraps a mask, requiring both S and S′ to be nonempty.
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        let treated = mask.iter().filter(|&&b| b).count();
        if treated == 0 || treated == mask.len() {
            return Err(Error::validation(format!(
                "region must leave both treated and untreated cells nonempty ({treated} of {} treated)",
                mask.len()
            )));
        }
        Ok(Self { mask })
    }

    /// Half-open rectangle `rows × cols`, matching slice notation `[i0:i1, j0:j1]`.
    pub fn rect(n_rows: usize, n_cols: usize, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        if rows.end > n_rows || cols.end > n_cols || rows.is_empty() || cols.is_empty() {
            return Err(Error::validation(format!(
                "region [{}:{}, {}:{}] does not fit a {n_rows}x{n_cols} grid",
                rows.start, rows.end, cols.start, cols.end
            )));
        }
        let mask = Array2::from_shape_fn((n_rows, n_cols), |(i, j)| {
            rows.contains(&i) && cols.contains(&j)
        });
        Self::new(mask)
    }

    /// The default treated block `[10:15, 10:15]`.
    pub fn default_for(n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::rect(n_rows, n_cols, 10..15, 10..15)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.mask
    }

    /// |S|
    pub fn treated_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// |S′|
    pub fn untreated_count(&self) -> usize {
        self.mask.len() - self.treated_count()
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.mapv(|b| !b),
        }
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.dim() != (grid.n_rows, grid.n_cols) {
            return Err(Error::validation(format!(
                "region is {:?} but grid is {}x{}",
                self.dim(),
                grid.n_rows,
                grid.n_cols
            )));
        }
        Ok(())
    }
}

// Serialized as one string of '0'/'1' per row.
impl Serialize for RegionMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<String> = self
            .mask
            .outer_iter()
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RegionMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rows = Vec::<String>::deserialize(deserializer)?;
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut mask = Array2::from_elem((n_rows, n_cols), false);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(D::Error::custom("region rows have unequal lengths"));
            }
            for (j, c) in row.chars().enumerate() {
                mask[[i, j]] = match c {
                    '1' => true,
                    '0' => false,
                    other => return Err(D::Error::custom(format!("invalid mask character {other:?}"))),
                };
            }
        }
        RegionMask::new(mask).map_err(D::Error::custom)
    }
}
