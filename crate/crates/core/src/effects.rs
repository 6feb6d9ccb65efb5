//! Direct, indirect and lagged average treatment effects, plus the
//! √PEHE and RMSE scores used to compare estimated effects with the oracle.
//!
//! Outcome fields are indexed `[t][i][j]`. An effect "at intervention time
//! `t` with lag `l`" is the outcome difference at `t + l`, so a field of `T`
//! steps yields `T - l` effect slices.

use ndarray::{Array1, Array3, ArrayBase, ArrayView3, Axis, Data, Dimension, Ix3, Zip};

use crate::error::{Error, Result};
use crate::grid::RegionMask;

/// Per-pixel effect map with its three scalar summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimates {
    /// τ[t][i][j], where slice 0 corresponds to intervention step `first_step`.
    pub tau_map: Array3<f64>,
    pub date: f64,
    pub iate: f64,
    pub late: f64,
    pub lag: usize,
    pub first_step: usize,
    pub region: RegionMask,
}

impl EffectEstimates {
    pub fn from_tau_map(
        tau_map: Array3<f64>,
        region: RegionMask,
        lag: usize,
        first_step: usize,
    ) -> Result<Self> {
        let (n_t, n, m) = tau_map.dim();
        if n_t == 0 {
            return Err(Error::validation("effect map has no time slices"));
        }
        if region.dim() != (n, m) {
            return Err(Error::validation(format!(
                "region {:?} does not match effect map {n}x{m}",
                region.dim()
            )));
        }
        let (date, iate, late) = region_means(tau_map.view(), &region);
        Ok(Self {
            tau_map,
            date,
            iate,
            late,
            lag,
            first_step,
            region,
        })
    }

    /// Mean effect over S at each intervention step.
    pub fn date_series(&self) -> Array1<f64> {
        masked_series(self.tau_map.view(), &self.region, true)
    }

    /// Mean effect over S′ at each intervention step.
    pub fn iate_series(&self) -> Array1<f64> {
        masked_series(self.tau_map.view(), &self.region, false)
    }

    /// Mean effect over the whole grid at each intervention step.
    pub fn late_series(&self) -> Array1<f64> {
        self.tau_map
            .mean_axis(Axis(2))
            .and_then(|a| a.mean_axis(Axis(1)))
            .expect("nonempty map")
    }

    /// Restricts the map to intervention steps `start..end` (absolute indices).
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        let n_t = self.tau_map.dim().0;
        if start < self.first_step || end > self.first_step + n_t || start >= end {
            return Err(Error::validation(format!(
                "window {start}..{end} outside available steps {}..{}",
                self.first_step,
                self.first_step + n_t
            )));
        }
        let sub = self
            .tau_map
            .slice(ndarray::s![start - self.first_step..end - self.first_step, .., ..])
            .to_owned();
        Self::from_tau_map(sub, self.region.clone(), self.lag, start)
    }
}

fn region_means(tau: ArrayView3<'_, f64>, region: &RegionMask) -> (f64, f64, f64) {
    let n_t = tau.dim().0 as f64;
    let mut in_sum = 0.0;
    let mut out_sum = 0.0;
    for slice in tau.outer_iter() {
        Zip::from(&slice)
            .and(region.as_array())
            .for_each(|&v, &treated| {
                if treated {
                    in_sum += v;
                } else {
                    out_sum += v;
                }
            });
    }
    let s = region.treated_count() as f64;
    let s_prime = region.untreated_count() as f64;
    let date = in_sum / (s * n_t);
    let iate = out_sum / (s_prime * n_t);
    let late = (in_sum + out_sum) / ((s + s_prime) * n_t);
    (date, iate, late)
}

fn masked_series(tau: ArrayView3<'_, f64>, region: &RegionMask, treated: bool) -> Array1<f64> {
    let count = if treated {
        region.treated_count()
    } else {
        region.untreated_count()
    } as f64;
    tau.outer_iter()
        .map(|slice| {
            let mut sum = 0.0;
            Zip::from(&slice).and(region.as_array()).for_each(|&v, &r| {
                if r == treated {
                    sum += v;
                }
            });
            sum / count
        })
        .collect()
}

fn check_pair<A, B>(y_cf: &ArrayBase<A, Ix3>, y_f: &ArrayBase<B, Ix3>, lag: usize) -> Result<()>
where
    A: Data,
    B: Data,
{
    if y_cf.dim() != y_f.dim() {
        return Err(Error::validation(format!(
            "outcome fields differ in shape: {:?} vs {:?}",
            y_cf.dim(),
            y_f.dim()
        )));
    }
    if lag >= y_f.dim().0 {
        return Err(Error::validation(format!(
            "lag {lag} leaves no valid steps in a field of {} steps",
            y_f.dim().0
        )));
    }
    Ok(())
}

/// τ[t] = y_cf[t+lag] − y_f[t+lag] for every valid `t`.
pub fn effect_map<A, B>(y_cf: &ArrayBase<A, Ix3>, y_f: &ArrayBase<B, Ix3>, lag: usize) -> Result<Array3<f64>>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
{
    check_pair(y_cf, y_f, lag)?;
    let cf = y_cf.slice(ndarray::s![lag.., .., ..]);
    let f = y_f.slice(ndarray::s![lag.., .., ..]);
    let mut tau = Array3::zeros(cf.dim());
    Zip::from(&mut tau)
        .and(&cf)
        .and(&f)
        .for_each(|t, &a, &b| *t = a.into() - b.into());
    Ok(tau)
}

/// Direct average treatment effect: mean outcome difference over S and all valid steps.
pub fn estimate_date<A, B>(
    y_cf: &ArrayBase<A, Ix3>,
    y_f: &ArrayBase<B, Ix3>,
    region: &RegionMask,
    lag: usize,
) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
{
    let tau = effect_map(y_cf, y_f, lag)?;
    check_region(&tau, region)?;
    Ok(region_means(tau.view(), region).0)
}

/// Indirect average treatment effect: mean outcome difference over S′.
pub fn estimate_iate<A, B>(
    y_cf: &ArrayBase<A, Ix3>,
    y_f: &ArrayBase<B, Ix3>,
    region: &RegionMask,
    lag: usize,
) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
{
    let tau = effect_map(y_cf, y_f, lag)?;
    check_region(&tau, region)?;
    Ok(region_means(tau.view(), region).1)
}

/// Lagged average treatment effect over the full grid ℕ.
pub fn estimate_late<A, B>(y_cf: &ArrayBase<A, Ix3>, y_f: &ArrayBase<B, Ix3>, lag: usize) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
{
    let tau = effect_map(y_cf, y_f, lag)?;
    Ok(tau.mean().expect("nonempty effect map"))
}

fn check_region(tau: &Array3<f64>, region: &RegionMask) -> Result<()> {
    let (_, n, m) = tau.dim();
    if region.dim() != (n, m) {
        return Err(Error::validation(format!(
            "region {:?} does not match field {n}x{m}",
            region.dim()
        )));
    }
    Ok(())
}

/// Root mean squared difference of two equally shaped effect arrays.
pub fn sqrt_pehe<A, B, D>(tau_true: &ArrayBase<A, D>, tau_pred: &ArrayBase<B, D>) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
    D: Dimension,
{
    root_mean_square_diff(tau_true, tau_pred, "effect")
}

/// Root mean squared prediction error of an outcome field.
pub fn rmse<A, B, D>(y_true: &ArrayBase<A, D>, y_pred: &ArrayBase<B, D>) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
    D: Dimension,
{
    root_mean_square_diff(y_true, y_pred, "outcome")
}

fn root_mean_square_diff<A, B, D>(a: &ArrayBase<A, D>, b: &ArrayBase<B, D>, what: &str) -> Result<f64>
where
    A: Data,
    B: Data,
    A::Elem: Copy + Into<f64>,
    B::Elem: Copy + Into<f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "{what} arrays differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::validation(format!("{what} arrays are empty")));
    }
    let mut acc = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x.into() - y.into();
        acc += d * d;
    });
    Ok((acc / a.len() as f64).sqrt())
}
