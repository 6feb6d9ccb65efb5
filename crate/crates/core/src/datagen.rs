//! Diffusion-driven benchmark generator with paired factual and
//! counterfactual worlds.
//!
//! Three coupled fields evolve on the grid: covariate `Z` diffuses freely,
//! treatment `X` diffuses and is driven by `∇²Z`, and outcome `Y` diffuses and
//! is driven by `∇²Z`, `∇²X` and (with interference) the neighborhood mean of
//! `X`. The counterfactual world rescales `X` inside the treated region and
//! re-runs the outcome update with the same noise draws, so `y_cf - y` is the
//! exact effect of the intervention.
//!
//! Modeling preconditions (not checked at runtime): `Z` is the only
//! confounder, the factual outcome is the potential outcome under the
//! observed treatment, and interference acts only through the `m`-neighborhood.

use ndarray::{s, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::effects::{effect_map, EffectEstimates};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, RegionMask, Role, SpatioTemporalField};

/// Any state value beyond this magnitude aborts generation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionParams {
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
    pub dt: f64,
    /// Z → X coupling.
    pub alpha: f64,
    /// Z → Y coupling.
    pub beta: f64,
    /// X → Y coupling.
    pub gamma: f64,
    /// Spillover coefficient on the neighborhood mean of X.
    pub beta2: f64,
    /// Delay, in steps, of the cross-variable coupling terms.
    pub lag: usize,
    pub neighborhood_radius: usize,
    pub interference: bool,
    pub noise_std_x: f64,
    pub noise_std_y: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            d_x: 0.01,
            d_y: 0.01,
            d_z: 0.01,
            dt: 0.1,
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.7,
            beta2: 0.5,
            lag: 1,
            neighborhood_radius: 1,
            interference: true,
            noise_std_x: 0.0,
            noise_std_y: 0.0,
        }
    }
}

impl DiffusionParams {
    /// Same coefficients with the spillover term switched off (β2 recorded as 0).
    pub fn without_interference(mut self) -> Self {
        self.interference = false;
        self.beta2 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            self.d_x,
            self.d_y,
            self.d_z,
            self.dt,
            self.alpha,
            self.beta,
            self.gamma,
            self.beta2,
            self.noise_std_x,
            self.noise_std_y,
        ];
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("diffusion parameters must be finite"));
        }
        if self.d_x < 0.0 || self.d_y < 0.0 || self.d_z < 0.0 {
            return Err(Error::validation("diffusion coefficients must be nonnegative"));
        }
        if self.dt <= 0.0 {
            return Err(Error::validation("dt must be positive"));
        }
        if self.neighborhood_radius == 0 {
            return Err(Error::validation("neighborhood radius must be at least 1"));
        }
        if self.lag == 0 {
            return Err(Error::validation("coupling lag must be at least 1"));
        }
        if self.noise_std_x < 0.0 || self.noise_std_y < 0.0 {
            return Err(Error::validation("noise standard deviations must be nonnegative"));
        }
        let d_max = self.d_x.max(self.d_y).max(self.d_z);
        if self.dt * d_max > 0.25 {
            return Err(Error::validation(format!(
                "explicit diffusion unstable: dt*max(D) = {} > 0.25",
                self.dt * d_max
            )));
        }
        Ok(())
    }
}

/// Multiplicative rewrite of X inside a region, sustained from `start_step` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub region: RegionMask,
    pub update_factor: f64,
    pub start_step: usize,
}

impl InterventionSpec {
    pub fn new(region: RegionMask, update_factor: f64, start_step: usize) -> Result<Self> {
        let spec = Self {
            region,
            update_factor,
            start_step,
        };
        if !update_factor.is_finite() {
            return Err(Error::validation("update factor must be finite"));
        }
        Ok(spec)
    }

    /// Factor 0.6 on the `[10:15, 10:15]` block from step 0.
    pub fn default_for(grid: &GridSpec) -> Result<Self> {
        Self::new(RegionMask::default_for(grid.n_rows, grid.n_cols)?, 0.6, 0)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        self.region.check_grid(grid)?;
        if !self.update_factor.is_finite() {
            return Err(Error::validation("update factor must be finite"));
        }
        if self.start_step >= grid.n_steps {
            return Err(Error::validation(format!(
                "intervention start {} outside [0, {})",
                self.start_step, grid.n_steps
            )));
        }
        Ok(())
    }

    pub fn is_active(&self, t: usize) -> bool {
        t >= self.start_step
    }
}

/// Factual and counterfactual trajectories with their generating setup.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    pub grid: GridSpec,
    pub x: SpatioTemporalField,
    pub z: SpatioTemporalField,
    pub y: SpatioTemporalField,
    pub x_cf: SpatioTemporalField,
    pub y_cf: SpatioTemporalField,
    pub params: DiffusionParams,
    pub intervention: InterventionSpec,
    pub seed: u64,
}

impl CausalDataset {
    /// Shape checks for every stored field.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for field in self.fields() {
            field.1.check_shape(&self.grid)?;
        }
        self.intervention.validate(&self.grid)
    }

    /// Stored variables in file order, keyed by their on-disk names.
    pub fn fields(&self) -> [(&'static str, &SpatioTemporalField); 5] {
        [
            ("X", &self.x),
            ("Z", &self.z),
            ("Y", &self.y),
            ("X_cf", &self.x_cf),
            ("Y_cf", &self.y_cf),
        ]
    }

    /// The first `steps` time steps. Generation is causal, so this equals a
    /// dataset generated directly with `steps` steps and the same seed.
    pub fn prefix(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.grid.n_steps {
            return Err(Error::validation(format!(
                "cannot take {steps} steps from a {}-step dataset",
                self.grid.n_steps
            )));
        }
        let grid = GridSpec::new(self.grid.n_rows, self.grid.n_cols, steps, self.grid.lag.min(steps - 1).max(1))?;
        let cut = |f: &SpatioTemporalField| {
            SpatioTemporalField::new(f.role, f.values.slice(ndarray::s![..steps, .., ..]).to_owned())
        };
        Ok(Self {
            grid,
            x: cut(&self.x),
            z: cut(&self.z),
            y: cut(&self.y),
            x_cf: cut(&self.x_cf),
            y_cf: cut(&self.y_cf),
            params: self.params.clone(),
            intervention: self.intervention.clone(),
            seed: self.seed,
        })
    }
}

/// Five-point Laplacian with replicated (zero-flux) edges.
pub fn laplacian(field: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (n, m) = field.dim();
    if n < 2 || m < 2 {
        return Err(Error::validation(format!("laplacian needs at least 2x2, got {n}x{m}")));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("laplacian input contains non-finite values"));
    }
    Ok(laplacian_unchecked(field))
}

fn laplacian_unchecked(field: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = field.dim();
    let mut padded = Array2::zeros((n + 2, m + 2));
    padded.slice_mut(s![1..n + 1, 1..m + 1]).assign(&field);
    // replicate the edges into the halo
    let top = padded.slice(s![1..2, ..]).to_owned();
    padded.slice_mut(s![0..1, ..]).assign(&top);
    let bottom = padded.slice(s![n..n + 1, ..]).to_owned();
    padded.slice_mut(s![n + 1..n + 2, ..]).assign(&bottom);
    let left = padded.slice(s![.., 1..2]).to_owned();
    padded.slice_mut(s![.., 0..1]).assign(&left);
    let right = padded.slice(s![.., m..m + 1]).to_owned();
    padded.slice_mut(s![.., m + 1..m + 2]).assign(&right);

    let mut out = Array2::zeros((n, m));
    Zip::from(&mut out)
        .and(padded.slice(s![0..n, 1..m + 1]))
        .and(padded.slice(s![2..n + 2, 1..m + 1]))
        .and(padded.slice(s![1..n + 1, 0..m]))
        .and(padded.slice(s![1..n + 1, 2..m + 2]))
        .and(&field)
        .for_each(|o, &up, &down, &l, &r, &c| *o = up + down + l + r - 4.0 * c);
    out
}

/// Mean over the `(2m+1)²` window around each cell, excluding the cell itself;
/// at the boundary only in-range cells are counted.
pub fn neighborhood_mean(field: ArrayView2<'_, f64>, radius: usize) -> Result<Array2<f64>> {
    let (n, m) = field.dim();
    if radius == 0 {
        return Err(Error::validation("neighborhood radius must be at least 1"));
    }
    if 2 * radius + 1 > n.min(m) {
        return Err(Error::validation(format!(
            "neighborhood radius {radius} too large for a {n}x{m} grid"
        )));
    }
    Ok(neighborhood_mean_unchecked(field, radius))
}

fn neighborhood_mean_unchecked(field: ArrayView2<'_, f64>, radius: usize) -> Array2<f64> {
    let (n, m) = field.dim();
    // summed-area table with a zero first row and column
    let mut sat = Array2::<f64>::zeros((n + 1, m + 1));
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..m {
            row += field[[i, j]];
            sat[[i + 1, j + 1]] = sat[[i, j + 1]] + row;
        }
    }
    Array2::from_shape_fn((n, m), |(i, j)| {
        let i0 = i.saturating_sub(radius);
        let j0 = j.saturating_sub(radius);
        let i1 = (i + radius + 1).min(n);
        let j1 = (j + radius + 1).min(m);
        let total = sat[[i1, j1]] - sat[[i0, j1]] - sat[[i1, j0]] + sat[[i0, j0]];
        let count = ((i1 - i0) * (j1 - j0) - 1) as f64;
        (total - field[[i, j]]) / count
    })
}

/// Rescales `x_t` inside the region once the intervention is active.
pub fn apply_intervention(x_t: ArrayView2<'_, f64>, spec: &InterventionSpec, t: usize) -> Result<Array2<f64>> {
    if x_t.dim() != spec.region.dim() {
        return Err(Error::validation(format!(
            "treatment slice {:?} does not match region {:?}",
            x_t.dim(),
            spec.region.dim()
        )));
    }
    let mut out = x_t.to_owned();
    if spec.is_active(t) {
        Zip::from(&mut out)
            .and(spec.region.as_array())
            .for_each(|v, &treated| {
                if treated {
                    *v *= spec.update_factor;
                }
            });
    }
    Ok(out)
}

/// One spatial slice of the three generated variables.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

/// Noise draws for one step, shared between the two worlds.
#[derive(Debug, Clone)]
struct StepNoise {
    x: Option<Array2<f64>>,
    y: Option<Array2<f64>>,
}

impl StepNoise {
    fn draw(params: &DiffusionParams, dim: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let mut sample = |std: f64| {
            (std > 0.0).then(|| {
                let normal = Normal::new(0.0, std).expect("validated std");
                Array2::from_shape_fn(dim, |_| normal.sample(rng))
            })
        };
        let x = sample(params.noise_std_x);
        let y = sample(params.noise_std_y);
        Self { x, y }
    }
}

/// Advances `(z, x, y)` by one explicit Euler step.
///
/// `prev` supplies the self-diffusion terms; `driver` supplies the
/// cross-variable couplings (the state `lag` steps back, which is `prev`
/// for the default lag of 1).
pub fn step(prev: &State, driver: &State, params: &DiffusionParams, rng: &mut ChaCha8Rng) -> Result<State> {
    let noise = StepNoise::draw(params, prev.x.dim(), rng);
    step_with_noise(prev, driver, params, &noise)
}

fn step_with_noise(prev: &State, driver: &State, params: &DiffusionParams, noise: &StepNoise) -> Result<State> {
    let dt = params.dt;
    let z_next = &prev.z + &(laplacian_unchecked(prev.z.view()) * (dt * params.d_z));
    let lap_z_drv = laplacian_unchecked(driver.z.view());

    let mut x_next = &prev.x + &((laplacian_unchecked(prev.x.view()) * params.d_x + &lap_z_drv * params.alpha) * dt);
    if let Some(eps) = &noise.x {
        x_next += eps;
    }

    let y_next = outcome_update(&prev.y, &lap_z_drv, driver.x.view(), params, noise.y.as_ref());
    Ok(State {
        z: z_next,
        x: x_next,
        y: y_next,
    })
}

fn outcome_update(
    y_prev: &Array2<f64>,
    lap_z_drv: &Array2<f64>,
    x_drv: ArrayView2<'_, f64>,
    params: &DiffusionParams,
    eps: Option<&Array2<f64>>,
) -> Array2<f64> {
    let mut drive = laplacian_unchecked(y_prev.view()) * params.d_y
        + lap_z_drv * params.beta
        + laplacian_unchecked(x_drv) * params.gamma;
    if params.interference {
        drive = drive + neighborhood_mean_unchecked(x_drv, params.neighborhood_radius) * params.beta2;
    }
    let mut y_next = y_prev + &(drive * params.dt);
    if let Some(eps) = eps {
        y_next += eps;
    }
    y_next
}

fn check_bounded(field: &Array2<f64>, variable: &'static str, step: usize) -> Result<()> {
    if field.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::Divergence { variable, step });
    }
    Ok(())
}

/// Seeded uniform [0,1] noise smoothed by one replicate-edge 3×3 box blur.
pub fn initial_field(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let raw = Array2::from_shape_fn((n, m), |_| rng.random::<f64>());
    Array2::from_shape_fn((n, m), |(i, j)| {
        let mut acc = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ii = (i as i64 + di).clamp(0, n as i64 - 1) as usize;
                let jj = (j as i64 + dj).clamp(0, m as i64 - 1) as usize;
                acc += raw[[ii, jj]];
            }
        }
        acc / 9.0
    })
}

fn store(field: &mut SpatioTemporalField, t: usize, values: &Array2<f64>) {
    field
        .values
        .index_axis_mut(ndarray::Axis(0), t)
        .assign(&values.mapv(|v| v as f32));
}

/// Runs both worlds for `grid.n_steps` steps. Pure in `(grid, params, spec, seed)`.
pub fn generate(grid: &GridSpec, params: &DiffusionParams, spec: &InterventionSpec, seed: u64) -> Result<CausalDataset> {
    grid.validate()?;
    params.validate()?;
    spec.validate(grid)?;
    let (n, m) = (grid.n_rows, grid.n_cols);
    if params.interference && 2 * params.neighborhood_radius + 1 > n.min(m) {
        return Err(Error::validation("neighborhood radius too large for the grid"));
    }
    if n < 2 || m < 2 {
        return Err(Error::validation("grid must be at least 2x2"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = initial_field(n, m, &mut rng);
    let x0 = initial_field(n, m, &mut rng);
    let y0 = initial_field(n, m, &mut rng);

    let mut x = SpatioTemporalField::zeros(Role::Treatment, grid);
    let mut z = SpatioTemporalField::zeros(Role::Covariate, grid);
    let mut y = SpatioTemporalField::zeros(Role::Outcome, grid);
    let mut x_cf = SpatioTemporalField::zeros(Role::Treatment, grid);
    let mut y_cf = SpatioTemporalField::zeros(Role::Outcome, grid);

    // full-precision histories: factual states and the counterfactual X/Y
    let mut states: Vec<State> = Vec::with_capacity(grid.n_steps);
    let mut x_hat: Vec<Array2<f64>> = Vec::with_capacity(grid.n_steps);
    let mut y_hat_prev = y0.clone();

    let initial = State { z: z0, x: x0, y: y0 };
    x_hat.push(apply_intervention(initial.x.view(), spec, 0)?);
    states.push(initial);

    for t in 1..grid.n_steps {
        let prev = &states[t - 1];
        let driver_idx = t.saturating_sub(params.lag);
        let driver = &states[driver_idx];
        let noise = StepNoise::draw(params, (n, m), &mut rng);
        let next = step_with_noise(prev, driver, params, &noise)?;
        check_bounded(&next.z, "Z", t)?;
        check_bounded(&next.x, "X", t)?;
        check_bounded(&next.y, "Y", t)?;

        let lap_z_drv = laplacian_unchecked(driver.z.view());
        let y_hat = outcome_update(&y_hat_prev, &lap_z_drv, x_hat[driver_idx].view(), params, noise.y.as_ref());
        check_bounded(&y_hat, "Y_cf", t)?;

        x_hat.push(apply_intervention(next.x.view(), spec, t)?);
        states.push(next);
        y_hat_prev = y_hat.clone();
        store(&mut y_cf, t, &y_hat);
    }

    for (t, state) in states.iter().enumerate() {
        store(&mut z, t, &state.z);
        store(&mut x, t, &state.x);
        store(&mut y, t, &state.y);
        store(&mut x_cf, t, &x_hat[t]);
    }
    store(&mut y_cf, 0, &states[0].y);

    let dataset = CausalDataset {
        grid: *grid,
        x,
        z,
        y,
        x_cf,
        y_cf,
        params: params.clone(),
        intervention: spec.clone(),
        seed,
    };
    Ok(dataset)
}

/// Ground-truth effects from the paired worlds: τ[t] = y_cf[t+lag] − y[t+lag].
pub fn true_effects(dataset: &CausalDataset, lag: usize) -> Result<EffectEstimates> {
    if lag >= dataset.grid.n_steps {
        return Err(Error::validation(format!(
            "lag {lag} out of range for {} steps",
            dataset.grid.n_steps
        )));
    }
    let tau = effect_map(&dataset.y_cf.values, &dataset.y.values, lag)?;
    EffectEstimates::from_tau_map(tau, dataset.intervention.region.clone(), lag, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lap_oracle(f: &Array2<f64>) -> Array2<f64> {
        let (n, m) = f.dim();
        let at = |i: i64, j: i64| f[[i.clamp(0, n as i64 - 1) as usize, j.clamp(0, m as i64 - 1) as usize]];
        Array2::from_shape_fn((n, m), |(i, j)| {
            let (i, j) = (i as i64, j as i64);
            at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j)
        })
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let f = Array2::from_elem((5, 7), 3.25);
        assert!(laplacian(f.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_hand_values() {
        let f = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let lap = laplacian(f.view()).unwrap();
        assert_eq!(lap[[1, 1]], 0.0);
        assert_eq!(lap[[0, 0]], 4.0);
    }

    #[test]
    fn laplacian_of_affine_interior_is_zero() {
        let f = Array2::from_shape_fn((6, 6), |(i, j)| 0.5 * i as f64 - 1.5 * j as f64 + 2.0);
        let lap = laplacian(f.view()).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!(lap[[i, j]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_rejects_bad_input() {
        assert!(laplacian(Array2::<f64>::zeros((1, 4)).view()).is_err());
        let mut f = Array2::<f64>::zeros((3, 3));
        f[[1, 1]] = f64::NAN;
        assert!(laplacian(f.view()).is_err());
    }

    #[test]
    fn neighborhood_mean_hand_values() {
        let f = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let nm = neighborhood_mean(f.view(), 1).unwrap();
        assert!((nm[[1, 1]] - 5.0).abs() < 1e-12);
        assert!((nm[[0, 0]] - 11.0 / 3.0).abs() < 1e-12);
        let c = Array2::from_elem((4, 4), 2.5);
        assert!(neighborhood_mean(c.view(), 1)
            .unwrap()
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(neighborhood_mean(f.view(), 2).is_err());
        assert!(neighborhood_mean(f.view(), 0).is_err());
    }

    #[test]
    fn intervention_rules() {
        let region = RegionMask::default_for(32, 32).unwrap();
        let ones = Array2::from_elem((32, 32), 1.0);
        let spec = InterventionSpec::new(region.clone(), 0.6, 3).unwrap();
        let before = apply_intervention(ones.view(), &spec, 2).unwrap();
        assert_eq!(before, ones);
        let after = apply_intervention(ones.view(), &spec, 3).unwrap();
        for ((i, j), &v) in after.indexed_iter() {
            let expected = if region.contains(i, j) { 0.6 } else { 1.0 };
            assert_eq!(v, expected);
        }
        let identity = InterventionSpec::new(region, 1.0, 0).unwrap();
        assert_eq!(apply_intervention(ones.view(), &identity, 5).unwrap(), ones);
        assert!(apply_intervention(Array2::<f64>::zeros((4, 4)).view(), &spec, 5).is_err());
    }

    #[test]
    fn constant_state_is_fixed_without_spillover() {
        let params = DiffusionParams {
            beta2: 0.0,
            ..DiffusionParams::default()
        };
        let c = Array2::from_elem((6, 6), 0.7);
        let s0 = State {
            z: c.clone(),
            x: c.clone(),
            y: c.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = s0.clone();
        for _ in 0..20 {
            s = step(&s, &s, &params, &mut rng).unwrap();
        }
        assert_eq!(s, s0);
    }

    #[test]
    fn single_step_matches_scalar_update() {
        let params = DiffusionParams::default();
        let z = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.1);
        let x = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 2 + j * 5) % 7) as f64 * 0.1);
        let y = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j * 4) % 3) as f64 * 0.2);
        let s0 = State {
            z: z.clone(),
            x: x.clone(),
            y: y.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s1 = step(&s0, &s0, &params, &mut rng).unwrap();

        let lz = lap_oracle(&z);
        let lx = lap_oracle(&x);
        let ly = lap_oracle(&y);
        for i in 0..4usize {
            for j in 0..4usize {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for ii in i.saturating_sub(1)..(i + 2).min(4) {
                    for jj in j.saturating_sub(1)..(j + 2).min(4) {
                        if (ii, jj) != (i, j) {
                            acc += x[[ii, jj]];
                            cnt += 1.0;
                        }
                    }
                }
                let xt = acc / cnt;
                let dt = 0.1;
                let ez = z[[i, j]] + dt * (0.01 * lz[[i, j]]);
                let ex = x[[i, j]] + dt * (0.01 * lx[[i, j]] + 0.5 * lz[[i, j]]);
                let ey = y[[i, j]] + dt * (0.01 * ly[[i, j]] + 0.3 * lz[[i, j]] + 0.7 * lx[[i, j]] + 0.5 * xt);
                assert!((s1.z[[i, j]] - ez).abs() < 1e-12);
                assert!((s1.x[[i, j]] - ex).abs() < 1e-12);
                assert!((s1.y[[i, j]] - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interference_only_changes_outcome_by_spillover() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s0 = State {
            z: initial_field(8, 8, &mut rng),
            x: initial_field(8, 8, &mut rng),
            y: initial_field(8, 8, &mut rng),
        };
        let with = DiffusionParams::default();
        let without = DiffusionParams {
            interference: false,
            ..with.clone()
        };
        let a = step(&s0, &s0, &with, &mut rng).unwrap();
        let b = step(&s0, &s0, &without, &mut rng).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.x, b.x);
        let spill = neighborhood_mean(s0.x.view(), 1).unwrap() * (with.dt * with.beta2);
        let diff = &a.y - &b.y;
        for (d, s) in diff.iter().zip(spill.iter()) {
            assert!((d - s).abs() < 1e-12);
        }
    }

    #[test]
    fn conservation_without_couplings() {
        let params = DiffusionParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            beta2: 0.0,
            interference: false,
            ..DiffusionParams::default()
        };
        let grid = GridSpec::new(12, 10, 200, 1).unwrap();
        let region = RegionMask::rect(12, 10, 2..5, 2..5).unwrap();
        let spec = InterventionSpec::new(region, 0.6, 0).unwrap();
        let ds = generate(&grid, &params, &spec, 4).unwrap();
        for field in [&ds.x, &ds.y, &ds.z] {
            let s0: f64 = field.slice(0).iter().map(|&v| v as f64).sum();
            let s_end: f64 = field.slice(199).iter().map(|&v| v as f64).sum();
            assert!((s0 - s_end).abs() < 1e-3, "{s0} vs {s_end}");
        }
    }

    #[test]
    fn identity_intervention_leaves_worlds_equal() {
        let grid = GridSpec::new(16, 16, 60, 1).unwrap();
        let spec = InterventionSpec::new(RegionMask::default_for(16, 16).unwrap(), 1.0, 0).unwrap();
        let ds = generate(&grid, &DiffusionParams::default(), &spec, 3).unwrap();
        assert_eq!(ds.x_cf, ds.x);
        assert_eq!(ds.y_cf, ds.y);
        let eff = true_effects(&ds, 1).unwrap();
        assert_eq!((eff.date, eff.iate, eff.late), (0.0, 0.0, 0.0));
    }

    #[test]
    fn worlds_split_at_start_step() {
        let grid = GridSpec::new(16, 16, 40, 1).unwrap();
        let spec = InterventionSpec::new(RegionMask::default_for(16, 16).unwrap(), 0.6, 15).unwrap();
        let ds = generate(&grid, &DiffusionParams::default(), &spec, 3).unwrap();
        for t in 0..15 {
            assert_eq!(ds.x_cf.slice(t), ds.x.slice(t));
            assert_eq!(ds.y_cf.slice(t), ds.y.slice(t));
        }
        assert_ne!(ds.x_cf.slice(15), ds.x.slice(15));
        assert_ne!(ds.y_cf.slice(16), ds.y.slice(16));
        // X is only rewritten inside the region
        for t in 0..40 {
            for (((i, j), &a), &b) in ds.x_cf.slice(t).indexed_iter().zip(ds.x.slice(t).iter()) {
                if !spec.region.contains(i, j) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn noise_is_shared_between_worlds() {
        let grid = GridSpec::new(16, 16, 30, 1).unwrap();
        let params = DiffusionParams {
            noise_std_x: 0.05,
            noise_std_y: 0.05,
            ..DiffusionParams::default()
        };
        let spec = InterventionSpec::new(RegionMask::default_for(16, 16).unwrap(), 1.0, 0).unwrap();
        let ds = generate(&grid, &params, &spec, 1).unwrap();
        assert_eq!(ds.y_cf, ds.y);
        let again = generate(&grid, &params, &spec, 1).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn no_spillover_no_x_effect_means_zero_late() {
        let grid = GridSpec::new(16, 16, 80, 1).unwrap();
        let params = DiffusionParams {
            gamma: 0.0,
            ..DiffusionParams::default().without_interference()
        };
        let spec = InterventionSpec::default_for(&grid).unwrap();
        let ds = generate(&grid, &params, &spec, 2).unwrap();
        let eff = true_effects(&ds, 1).unwrap();
        assert_eq!(eff.late, 0.0);
        assert_eq!(eff.date, 0.0);
    }

    #[test]
    fn unstable_params_rejected() {
        let params = DiffusionParams {
            d_x: 3.0,
            ..DiffusionParams::default()
        };
        assert!(params.validate().is_err());
        assert!(DiffusionParams {
            dt: 0.0,
            ..DiffusionParams::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn divergence_reported_with_variable_and_step() {
        let grid = GridSpec::new(16, 16, 400, 1).unwrap();
        let params = DiffusionParams {
            noise_std_x: 1e5,
            ..DiffusionParams::default()
        };
        let spec = InterventionSpec::default_for(&grid).unwrap();
        match generate(&grid, &params, &spec, 0) {
            Err(Error::Divergence { variable, step }) => {
                assert!(step > 0);
                assert!(["X", "Y", "Y_cf"].contains(&variable));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn prefix_matches_direct_generation() {
        let long = GridSpec::new(16, 16, 60, 1).unwrap();
        let short = GridSpec::new(16, 16, 25, 1).unwrap();
        let spec = InterventionSpec::default_for(&long).unwrap();
        let params = DiffusionParams {
            noise_std_x: 0.01,
            noise_std_y: 0.01,
            ..DiffusionParams::default()
        };
        let a = generate(&long, &params, &spec, 3).unwrap().prefix(25).unwrap();
        let b = generate(&short, &params, &spec, 3).unwrap();
        assert_eq!(a, b);
        assert!(b.prefix(0).is_err());
        assert!(b.prefix(26).is_err());
    }
}
