//! Correlated lognormal paths of every asset and FX rate under the domestic
//! martingale measure, stepped exactly on a time grid.
//!
//! Each path draws from its own ChaCha stream (`seed`, stream = path index),
//! consuming one standard normal per driver per step in a fixed order, so a
//! path's values do not depend on how paths are spread over threads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{CurrencyIndex, ModelError, ValidatedModel};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("time grid needs at least two points")]
    EmptyGrid,
    #[error("at least one path is required")]
    ZeroPaths,
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Strictly ascending times from 0 to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TimeGrid<T: Real> {
    times: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(times: Vec<T>) -> Result<Self, SimError> {
        if times.len() < 2 {
            return Err(SimError::EmptyGrid);
        }
        if times[0] != T::zero() {
            return Err(SimError::BadGrid("first time must be 0".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(SimError::BadGrid("non-finite time".into()));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SimError::BadGrid(format!("times not ascending at index {}", i + 1)));
        }
        Ok(Self { times })
    }

    pub fn uniform(horizon: T, steps: usize) -> Result<Self, SimError> {
        Self::with_dates(horizon, steps, &[])
    }

    /// Uniform grid with `steps` intervals on `[0, horizon]`, plus every date
    /// in `dates` not already within snapping distance of a node. The horizon
    /// is extended to the last date if needed.
    pub fn with_dates(horizon: T, steps: usize, dates: &[T]) -> Result<Self, SimError> {
        if steps == 0 || !(horizon > T::zero()) {
            return Err(SimError::EmptyGrid);
        }
        let n = T::from_usize_lossy(steps);
        let mut times: Vec<T> = (0..=steps)
            .map(|i| horizon * T::from_usize_lossy(i) / n)
            .collect();
        times[steps] = horizon;
        for &d in dates {
            if !d.is_finite() || d < T::zero() {
                return Err(SimError::BadGrid(format!("bad date {d}")));
            }
            // dates past the horizon extend the grid
            if (d > horizon && !close(d, horizon)) || nearest(&times, d).is_none() {
                times.push(d);
            }
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        }
        Self::new(times)
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> T {
        *self.times.last().expect("non-empty grid")
    }

    pub fn dt(&self, j: usize) -> T {
        self.times[j + 1] - self.times[j]
    }

    /// Node matching `t` up to snapping tolerance.
    pub fn index_of(&self, t: T) -> Option<usize> {
        nearest(&self.times, t)
    }

    /// Last node at or before `t`.
    pub fn floor_index(&self, t: T) -> usize {
        if let Some(j) = self.index_of(t) {
            return j;
        }
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn convert<U: Real>(&self) -> TimeGrid<U> {
        TimeGrid {
            times: self.times.iter().map(|t| U::lit(t.to_f64_lossy())).collect(),
        }
    }
}

fn snap_tol<T: Real>(t: T) -> T {
    T::lit(1e-9) + T::epsilon() * T::lit(8.0) * t.abs().max(T::one())
}

fn close<T: Real>(a: T, b: T) -> bool {
    (a - b).abs() <= snap_tol(a)
}

fn nearest<T: Real>(times: &[T], t: T) -> Option<usize> {
    let k = times.partition_point(|&s| s < t);
    [k.checked_sub(1), Some(k)]
        .into_iter()
        .flatten()
        .filter(|&i| i < times.len())
        .find(|&i| close(times[i], t))
}

/// Probability measure the paths were generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Domestic martingale measure.
    RiskNeutral,
    /// Physical measure, using the configured `p_drift` where present.
    Physical,
}

/// Q^e drift of an asset's spot at `t`: repo minus dividend yield, with the
/// quanto correction `-rho sigma_S sigma_X` for foreign assets.
pub fn qe_asset_drift<T: Real>(model: &ValidatedModel<T>, asset: usize, t: T) -> T {
    let a = &model.assets()[asset];
    let mut mu = a.repo_rate.rate_at(t) - a.dividend_yield.rate_at(t);
    if let Some(d) = model.fx_driver(a.currency) {
        let fx = model.fx_spec(a.currency).expect("foreign currency has an FX spec");
        mu = mu - model.correlation().get(asset, d) * a.sigma * fx.sigma;
    }
    mu
}

/// Q^e drift of X^{e,k}: `r^e - r^k`.
pub fn qe_fx_drift<T: Real>(model: &ValidatedModel<T>, k: CurrencyIndex, t: T) -> Result<T, ModelError> {
    if k == model.domestic() {
        return Err(ModelError::DomesticPairRequested(model.currency_code(k).to_string()));
    }
    if k.0 >= model.n_currencies() {
        return Err(ModelError::UnknownCurrency(format!("#{}", k.0)));
    }
    Ok(model.unsecured(model.domestic()).rate_at(t) - model.unsecured(k).rate_at(t))
}

/// `int_a^b` of the Q^e drift of driver `d`, exact for piecewise-constant rates.
fn drift_integral<T: Real>(model: &ValidatedModel<T>, d: usize, a: T, b: T, measure: Measure) -> T {
    let na = model.assets().len();
    if d < na {
        let asset = &model.assets()[d];
        if let (Measure::Physical, Some(mu)) = (measure, asset.p_drift) {
            return mu * (b - a);
        }
        let mut m = asset.repo_rate.integral(a, b) - asset.dividend_yield.integral(a, b);
        if let Some(x) = model.fx_driver(asset.currency) {
            let fx = model.fx_spec(asset.currency).expect("fx spec");
            m = m - model.correlation().get(d, x) * asset.sigma * fx.sigma * (b - a);
        }
        m
    } else {
        let fx = &model.fx_specs()[d - na];
        if let (Measure::Physical, Some(mu)) = (measure, fx.p_drift) {
            return mu * (b - a);
        }
        model.unsecured(model.domestic()).integral(a, b) - model.unsecured(fx.currency).integral(a, b)
    }
}

/// Simulated paths plus the deterministic cash accounts on the same grid.
#[derive(Debug, Clone)]
pub struct ScenarioSet<T: Real> {
    model: Arc<ValidatedModel<T>>,
    grid: TimeGrid<T>,
    n_paths: usize,
    n_drivers: usize,
    /// `[(path * n_drivers + driver) * n_times + j]`
    data: Vec<T>,
    /// Unsecured account per currency, `[k][j]`.
    unsecured: Vec<Vec<T>>,
    /// Repo account per asset, `[i][j]`.
    repo: Vec<Vec<T>>,
    seed: u64,
    measure: Measure,
}

impl<T: Real> ScenarioSet<T> {
    pub fn model(&self) -> &ValidatedModel<T> {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<ValidatedModel<T>> {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn n_drivers(&self) -> usize {
        self.n_drivers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn labels(&self) -> &[String] {
        self.model.driver_labels()
    }

    /// All values of driver `d` along path `p`.
    pub fn path(&self, p: usize, d: usize) -> &[T] {
        let nt = self.n_times();
        let start = (p * self.n_drivers + d) * nt;
        &self.data[start..start + nt]
    }

    pub fn level(&self, p: usize, d: usize, j: usize) -> T {
        self.data[(p * self.n_drivers + d) * self.n_times() + j]
    }

    pub fn asset(&self, p: usize, i: usize, j: usize) -> T {
        self.level(p, i, j)
    }

    /// X^{e,k} at node `j`; identically one for the domestic currency.
    pub fn fx(&self, p: usize, k: CurrencyIndex, j: usize) -> T {
        match self.model.fx_driver(k) {
            Some(d) => self.level(p, d, j),
            None => T::one(),
        }
    }

    pub fn unsecured_account(&self, k: CurrencyIndex, j: usize) -> T {
        self.unsecured[k.0][j]
    }

    pub fn domestic_account(&self, j: usize) -> T {
        self.unsecured[self.model.domestic().0][j]
    }

    pub fn repo_account(&self, i: usize, j: usize) -> T {
        self.repo[i][j]
    }

    /// Raw storage, for bitwise comparisons.
    pub fn raw(&self) -> &[T] {
        &self.data
    }
}

/// Simulates `n_paths` paths on `grid` from master `seed`.
pub fn simulate<T: Real>(
    model: Arc<ValidatedModel<T>>,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<ScenarioSet<T>, SimError> {
    if n_paths == 0 {
        return Err(SimError::ZeroPaths);
    }
    if grid.len() < 2 {
        return Err(SimError::EmptyGrid);
    }
    let nt = grid.len();
    let nd = model.n_drivers();
    let na = model.assets().len();
    let times = grid.times();

    let sigma: Vec<T> = model
        .assets()
        .iter()
        .map(|a| a.sigma)
        .chain(model.fx_specs().iter().map(|f| f.sigma))
        .collect();
    let init: Vec<T> = model
        .assets()
        .iter()
        .map(|a| a.s0)
        .chain(model.fx_specs().iter().map(|f| f.x0))
        .collect();

    // per step: deterministic log-drift and diffusion scale for each driver
    let mut log_drift = vec![T::zero(); (nt - 1) * nd];
    let mut vol = vec![T::zero(); (nt - 1) * nd];
    let half = T::lit(0.5);
    for j in 0..nt - 1 {
        let dt = times[j + 1] - times[j];
        for d in 0..nd {
            let s = sigma[d];
            log_drift[j * nd + d] = drift_integral(&model, d, times[j], times[j + 1], measure) - half * s * s * dt;
            vol[j * nd + d] = s * dt.sqrt();
        }
    }
    let factor = model.factor().to_vec();

    let mut data = vec![T::zero(); n_paths * nd * nt];
    if nd > 0 {
        data.par_chunks_mut(nd * nt).enumerate().for_each(|(p, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut eps = vec![T::zero(); nd];
            for d in 0..nd {
                chunk[d * nt] = init[d];
            }
            for j in 0..nt - 1 {
                for e in eps.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *e = T::lit(z);
                }
                for d in 0..nd {
                    let row = &factor[d * nd..(d + 1) * nd];
                    // full row: the eigen fallback factor is not triangular
                    let z = row.iter().zip(&eps).fold(T::zero(), |acc, (&f, &e)| acc + f * e);
                    let step = log_drift[j * nd + d] + vol[j * nd + d] * z;
                    chunk[d * nt + j + 1] = chunk[d * nt + j] * step.exp();
                }
            }
        });
    }

    let unsecured = (0..model.n_currencies())
        .map(|k| accounts(times, |t| model.unsecured(CurrencyIndex(k)).integral(T::zero(), t)))
        .collect();
    let repo = (0..na)
        .map(|i| accounts(times, |t| model.assets()[i].repo_rate.integral(T::zero(), t)))
        .collect();

    Ok(ScenarioSet {
        model,
        grid: grid.clone(),
        n_paths,
        n_drivers: nd,
        data,
        unsecured,
        repo,
        seed,
        measure,
    })
}

fn accounts<T: Real>(times: &[T], integral: impl Fn(T) -> T) -> Vec<T> {
    times.iter().map(|&t| integral(t).exp()).collect()
}
