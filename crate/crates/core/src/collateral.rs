//! Collateral amounts, margin interest and the convention-specific adjustment
//! streams that collateral adds to the hedger's wealth.
//!
//! All streams are in domestic units and use left-point collateral and FX
//! levels on each grid interval, with exact rate integrals. Sign: `C > 0`
//! means the hedger holds collateral, `C < 0` means it has posted.

use serde::{Deserialize, Serialize};

use crate::model::{CurrencyIndex, ModelError, RateCurve, RateRole, ValidatedModel};
use crate::pathfunc::{Contract, PathError};
use crate::scalar::Real;
use crate::simulation::ScenarioSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CollError {
    #[error("FX level must be positive, got {0}")]
    NonPositiveFx(f64),
    #[error("haircut {name} = {value} must exceed -1")]
    InvalidHaircut { name: &'static str, value: f64 },
    #[error("missing collateral rates: {0}")]
    MissingRates(ModelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("collateral asset {asset} is not denominated in the collateral currency {currency}")]
    AssetCurrencyMismatch { asset: String, currency: String },
    #[error("unknown collateral functional {0:?}")]
    UnknownFunctional(String),
    #[error("bad parameters for {name}: {reason}")]
    BadParams { name: String, reason: String },
    #[error("endogenous collateral has no precomputed path; use the BSDE solver")]
    EndogenousMode,
    #[error("collateral path shape {got:?} does not match scenario {expected:?}")]
    GridMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Path(#[from] Box<PathError>),
}

impl From<PathError> for CollError {
    fn from(e: PathError) -> Self {
        CollError::Path(Box::new(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollateralForm {
    Cash,
    /// Shares of `asset` (denominated in the collateral currency) are posted.
    RiskyAsset { asset: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Segregation,
    Rehypothecation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollateralMode {
    /// Collateral given by a named functional of the grid state.
    Exogenous {
        name: String,
        #[serde(default)]
        params: serde_json::Value,
    },
    /// Collateral tied to the contract's own value; solved by the BSDE module.
    Endogenous,
}

/// The four combinations of form and convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConventionKind {
    CashSegregation,
    CashRehypothecation,
    RiskySegregation,
    RiskyRehypothecation,
}

impl ConventionKind {
    pub const ALL: [ConventionKind; 4] = [
        ConventionKind::CashSegregation,
        ConventionKind::CashRehypothecation,
        ConventionKind::RiskySegregation,
        ConventionKind::RiskyRehypothecation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConventionKind::CashSegregation => "cash-segregation",
            ConventionKind::CashRehypothecation => "cash-rehypothecation",
            ConventionKind::RiskySegregation => "risky-segregation",
            ConventionKind::RiskyRehypothecation => "risky-rehypothecation",
        }
    }

    pub fn is_risky(self) -> bool {
        matches!(self, ConventionKind::RiskySegregation | ConventionKind::RiskyRehypothecation)
    }
}

impl std::fmt::Display for ConventionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollateralSpec {
    /// Collateral currency k3.
    pub currency: String,
    pub form: CollateralForm,
    pub convention: Convention,
    /// Haircut on collateral received, `> -1`.
    #[serde(default)]
    pub delta1: f64,
    /// Haircut on collateral posted, `> -1`.
    #[serde(default)]
    pub delta2: f64,
    pub mode: CollateralMode,
}

impl CollateralSpec {
    pub fn cash(currency: &str, convention: Convention) -> Self {
        Self {
            currency: currency.into(),
            form: CollateralForm::Cash,
            convention,
            delta1: 0.0,
            delta2: 0.0,
            mode: CollateralMode::Endogenous,
        }
    }

    pub fn risky(currency: &str, asset: &str, convention: Convention) -> Self {
        Self {
            form: CollateralForm::RiskyAsset { asset: asset.into() },
            ..Self::cash(currency, convention)
        }
    }

    pub fn of_kind(kind: ConventionKind, currency: &str, asset: &str) -> Self {
        match kind {
            ConventionKind::CashSegregation => Self::cash(currency, Convention::Segregation),
            ConventionKind::CashRehypothecation => Self::cash(currency, Convention::Rehypothecation),
            ConventionKind::RiskySegregation => Self::risky(currency, asset, Convention::Segregation),
            ConventionKind::RiskyRehypothecation => Self::risky(currency, asset, Convention::Rehypothecation),
        }
    }

    pub fn with_haircuts(mut self, delta1: f64, delta2: f64) -> Self {
        self.delta1 = delta1;
        self.delta2 = delta2;
        self
    }

    pub fn exogenous(mut self, name: &str, params: serde_json::Value) -> Self {
        self.mode = CollateralMode::Exogenous {
            name: name.into(),
            params,
        };
        self
    }

    pub fn kind(&self) -> ConventionKind {
        match (&self.form, self.convention) {
            (CollateralForm::Cash, Convention::Segregation) => ConventionKind::CashSegregation,
            (CollateralForm::Cash, Convention::Rehypothecation) => ConventionKind::CashRehypothecation,
            (CollateralForm::RiskyAsset { .. }, Convention::Segregation) => ConventionKind::RiskySegregation,
            (CollateralForm::RiskyAsset { .. }, Convention::Rehypothecation) => ConventionKind::RiskyRehypothecation,
        }
    }

    /// Checks haircuts, the collateral currency and the posted asset against `model`.
    pub fn check<T: Real>(&self, model: &ValidatedModel<T>) -> Result<ResolvedSpec<T>, CollError> {
        for (name, value) in [("delta1", self.delta1), ("delta2", self.delta2)] {
            if !(value > -1.0) || !value.is_finite() {
                return Err(CollError::InvalidHaircut { name, value });
            }
        }
        let k3 = model.currency(&self.currency)?;
        let asset = match &self.form {
            CollateralForm::Cash => None,
            CollateralForm::RiskyAsset { asset } => {
                let (i, a) = model.asset(asset)?;
                if a.currency != k3 {
                    return Err(CollError::AssetCurrencyMismatch {
                        asset: asset.clone(),
                        currency: self.currency.clone(),
                    });
                }
                if let Some(x) = model.fx_driver(k3) {
                    if model.correlation().get(i, x) != T::zero() {
                        log::warn!(
                            "collateral asset {} is correlated with FX:{}; posted collateral value moves with the exchange rate",
                            asset,
                            self.currency
                        );
                    }
                }
                Some(i)
            }
        };
        Ok(ResolvedSpec {
            kind: self.kind(),
            k3,
            asset,
            delta1: T::lit(self.delta1),
            delta2: T::lit(self.delta2),
        })
    }
}

/// A [`CollateralSpec`] checked against a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedSpec<T: Real> {
    pub kind: ConventionKind,
    pub k3: CurrencyIndex,
    /// Index of the posted asset for risky collateral.
    pub asset: Option<usize>,
    pub delta1: T,
    pub delta2: T,
}

/// `C^{k3} = [(1+delta1) M^+ - (1+delta2) M^-] / X^{e,k3}` for a mark `M` in domestic units.
pub fn collateral_from_mark<T: Real>(mark: T, delta1: T, delta2: T, fx_level: T) -> Result<T, CollError> {
    if !(fx_level > T::zero()) {
        return Err(CollError::NonPositiveFx(fx_level.to_f64_lossy()));
    }
    let one = T::one();
    Ok(((one + delta1) * mark.pos() - (one + delta2) * mark.neg_part()) / fx_level)
}

/// Collateral amounts in units of k3, `[path * n_times + j]`, zero at the last node.
#[derive(Debug, Clone, PartialEq)]
pub struct CollateralPath<T: Real> {
    n_paths: usize,
    n_times: usize,
    currency: CurrencyIndex,
    values: Vec<T>,
}

impl<T: Real> CollateralPath<T> {
    /// Wraps raw values; the terminal node of every path is reset to zero.
    pub fn from_values(n_paths: usize, n_times: usize, currency: CurrencyIndex, mut values: Vec<T>) -> Self {
        assert_eq!(values.len(), n_paths * n_times, "collateral values shape");
        for p in 0..n_paths {
            values[p * n_times + n_times - 1] = T::zero();
        }
        Self {
            n_paths,
            n_times,
            currency,
            values,
        }
    }

    pub fn from_fn(scenario: &ScenarioSet<T>, currency: CurrencyIndex, f: impl Fn(usize, usize) -> T) -> Self {
        let (np, nt) = (scenario.n_paths(), scenario.n_times());
        let values = (0..np * nt).map(|i| f(i / nt, i % nt)).collect();
        Self::from_values(np, nt, currency, values)
    }

    pub fn constant(scenario: &ScenarioSet<T>, currency: CurrencyIndex, amount: T) -> Self {
        Self::from_fn(scenario, currency, |_, _| amount)
    }

    pub fn zero(scenario: &ScenarioSet<T>, currency: CurrencyIndex) -> Self {
        Self::constant(scenario, currency, T::zero())
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|&c| -c).collect(),
            ..self.clone()
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn currency(&self) -> CurrencyIndex {
        self.currency
    }

    pub fn get(&self, p: usize, j: usize) -> T {
        self.values[p * self.n_times + j]
    }

    /// Collateral held, `C^+`.
    pub fn received(&self, p: usize, j: usize) -> T {
        self.get(p, j).pos()
    }

    /// Collateral posted, `C^-`.
    pub fn posted(&self, p: usize, j: usize) -> T {
        self.get(p, j).neg_part()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn check_shape(&self, scenario: &ScenarioSet<T>) -> Result<(), CollError> {
        let expected = (scenario.n_paths(), scenario.n_times());
        let got = (self.n_paths, self.n_times);
        if expected != got {
            return Err(CollError::GridMismatch { expected, got });
        }
        Ok(())
    }
}

/// How the exchange-rate exposure of collateral enters the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FxTerm {
    /// `-C_j (X_{j+1} - X_j)`: the realized term, used in wealth replay.
    Increment,
    /// `-C_j X_j int (r^e - r^{k3})`: its expectation under the domestic
    /// martingale measure, used in pricing.
    Drift,
}

/// Rates entering a convention's carry terms, integrated per grid interval.
/// A side's rates are only required when the path has collateral on that side.
struct CarryRates<T: Real> {
    /// `int (r_received - r^{c,b})` on each interval.
    received: Vec<T>,
    /// `int (r_posted - r^{c,l})` on each interval.
    posted: Vec<T>,
    /// `int (r^e - r^{k3})` on each interval.
    fx_drift: Vec<T>,
}

fn role<T: Real>(model: &ValidatedModel<T>, k: CurrencyIndex, r: RateRole) -> Result<&RateCurve<T>, CollError> {
    model.rate(k, r).map_err(CollError::MissingRates)
}

impl<T: Real> CarryRates<T> {
    fn new(scenario: &ScenarioSet<T>, spec: &ResolvedSpec<T>, coll: &CollateralPath<T>) -> Result<Self, CollError> {
        let model = scenario.model();
        let k3 = spec.k3;
        let r_e = model.unsecured(model.domestic());
        let times = scenario.grid().times();
        let per_interval = |c: &RateCurve<T>, d: &RateCurve<T>| -> Vec<T> {
            times.windows(2).map(|w| c.integral(w[0], w[1]) - d.integral(w[0], w[1])).collect()
        };
        let zeros = || vec![T::zero(); times.len() - 1];
        let received = if coll.values().iter().any(|&c| c > T::zero()) {
            let held = match spec.kind {
                ConventionKind::CashSegregation | ConventionKind::RiskySegregation => {
                    role(model, k3, RateRole::CollReinvestSeg)?
                }
                ConventionKind::CashRehypothecation => r_e,
                ConventionKind::RiskyRehypothecation => role(model, k3, RateRole::CollReinvestRehyp)?,
            };
            per_interval(held, role(model, k3, RateRole::CollateralBorrow)?)
        } else {
            zeros()
        };
        let posted = if coll.values().iter().any(|&c| c < T::zero()) {
            let posting = if spec.kind.is_risky() {
                role(model, k3, RateRole::CollPostFunding)?
            } else {
                role(model, k3, RateRole::CashPostFunding)?
            };
            per_interval(posting, role(model, k3, RateRole::CollateralLend)?)
        } else {
            zeros()
        };
        Ok(Self {
            received,
            posted,
            fx_drift: per_interval(r_e, model.unsecured(k3)),
        })
    }
}

/// Per-interval increments of a collateral stream, split into the carry part
/// and the FX part, `[path * (n_times - 1) + j]` for interval `(t_j, t_{j+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamIncrements<T: Real> {
    n_paths: usize,
    n_steps: usize,
    pub carry: Vec<T>,
    pub fx: Vec<T>,
}

impl<T: Real> StreamIncrements<T> {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn total(&self, p: usize, j: usize) -> T {
        let i = p * self.n_steps + j;
        self.carry[i] + self.fx[i]
    }

    pub fn fx_at(&self, p: usize, j: usize) -> T {
        self.fx[p * self.n_steps + j]
    }
}

/// Increments of the convention's adjustment stream on every path and interval.
///
/// | convention | received carry | posted carry |
/// |---|---|---|
/// | cash-segregation | `r^{d+2,s} - r^{c,b}` | `r^{d+3} - r^{c,l}` |
/// | cash-rehypothecation | `r^e - r^{c,b}` | `r^{d+3} - r^{c,l}` |
/// | risky-segregation | `r^{d+2,s} - r^{c,b}` | `r^{d+1} - r^{c,l}` |
/// | risky-rehypothecation | `r^{d+2,h} - r^{c,b}` | `r^{d+1} - r^{c,l}` |
///
/// Received carry is earned on `X C^+`, posted carry is paid on `X C^-`, and
/// the FX term is selected by `fx_term`.
pub fn adjustment_increments<T: Real>(
    scenario: &ScenarioSet<T>,
    coll: &CollateralPath<T>,
    spec: &ResolvedSpec<T>,
    fx_term: FxTerm,
) -> Result<StreamIncrements<T>, CollError> {
    coll.check_shape(scenario)?;
    let rates = CarryRates::new(scenario, spec, coll)?;
    let (np, nt) = (scenario.n_paths(), scenario.n_times());
    let ns = nt - 1;
    let k3 = spec.k3;
    let domestic = k3 == scenario.model().domestic();
    let mut carry = vec![T::zero(); np * ns];
    let mut fx = vec![T::zero(); np * ns];
    for p in 0..np {
        for j in 0..ns {
            let c = coll.get(p, j);
            let x = scenario.fx(p, k3, j);
            carry[p * ns + j] = x * (c.pos() * rates.received[j] - c.neg_part() * rates.posted[j]);
            if !domestic {
                fx[p * ns + j] = match fx_term {
                    FxTerm::Increment => -c * (scenario.fx(p, k3, j + 1) - x),
                    FxTerm::Drift => -c * x * rates.fx_drift[j],
                };
            }
        }
    }
    Ok(StreamIncrements {
        n_paths: np,
        n_steps: ns,
        carry,
        fx,
    })
}

/// Cumulative adjustment stream `A-hat`, `[path * n_times + j]`, zero at `t_0`.
pub fn adjustment_stream<T: Real>(
    scenario: &ScenarioSet<T>,
    coll: &CollateralPath<T>,
    spec: &ResolvedSpec<T>,
    fx_term: FxTerm,
) -> Result<Vec<T>, CollError> {
    let inc = adjustment_increments(scenario, coll, spec, fx_term)?;
    Ok(cumulate(inc.n_paths, inc.n_steps, |p, j| inc.total(p, j)))
}

/// Cumulative margin interest `F^c = int X C^- r^{c,l} - int X C^+ r^{c,b}`,
/// `[path * n_times + j]`.
pub fn margin_interest<T: Real>(
    scenario: &ScenarioSet<T>,
    coll: &CollateralPath<T>,
    spec: &ResolvedSpec<T>,
) -> Result<Vec<T>, CollError> {
    coll.check_shape(scenario)?;
    let model = scenario.model();
    let times = scenario.grid().times();
    let side = |needed: bool, r: RateRole| -> Result<Vec<T>, CollError> {
        if !needed {
            return Ok(vec![T::zero(); times.len() - 1]);
        }
        let curve = role(model, spec.k3, r)?;
        Ok(times.windows(2).map(|w| curve.integral(w[0], w[1])).collect())
    };
    let ib = side(coll.values().iter().any(|&c| c > T::zero()), RateRole::CollateralBorrow)?;
    let il = side(coll.values().iter().any(|&c| c < T::zero()), RateRole::CollateralLend)?;
    Ok(cumulate(scenario.n_paths(), times.len() - 1, |p, j| {
        let x = scenario.fx(p, spec.k3, j);
        x * coll.posted(p, j) * il[j] - x * coll.received(p, j) * ib[j]
    }))
}

fn cumulate<T: Real>(np: usize, ns: usize, inc: impl Fn(usize, usize) -> T) -> Vec<T> {
    let nt = ns + 1;
    let mut out = vec![T::zero(); np * nt];
    for p in 0..np {
        for j in 0..ns {
            out[p * nt + j + 1] = out[p * nt + j] + inc(p, j);
        }
    }
    out
}

/// Collateral-related part `V^c` of the hedger's wealth in domestic units.
pub fn collateral_wealth<T: Real>(kind: ConventionKind, fx_level: T, c: T) -> T {
    match kind {
        ConventionKind::CashRehypothecation => -fx_level * c,
        _ => fx_level * c.neg_part(),
    }
}

/// Exogenous collateral rules available by name.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional<T: Real> {
    /// `C = amount` in units of k3 until maturity. Haircuts are not applied.
    Constant { amount: T },
    /// Mark `M = fraction * X^{e,k} S` of an asset, turned into collateral with haircuts.
    FractionOfAsset { asset: usize, fraction: T },
    /// Mark equal to the unsecured forward value of the remaining flows,
    /// `M_t = scale * sum_{t_j > t} a_j X^{e,k2}_t B^{k2}_t / B^{k2}_{t_j}`.
    MarkProxy { scale: T },
}

pub const FUNCTIONALS: [&str; 3] = ["constant", "fraction_of_asset", "mark_proxy"];

fn param_f64(name: &str, params: &serde_json::Value, key: &str, default: Option<f64>) -> Result<f64, CollError> {
    match params.get(key) {
        Some(v) => v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| CollError::BadParams {
            name: name.into(),
            reason: format!("{key} must be a finite number"),
        }),
        None => default.ok_or_else(|| CollError::BadParams {
            name: name.into(),
            reason: format!("missing {key}"),
        }),
    }
}

impl<T: Real> Functional<T> {
    pub fn resolve(model: &ValidatedModel<T>, name: &str, params: &serde_json::Value) -> Result<Self, CollError> {
        match name {
            "constant" => Ok(Functional::Constant {
                amount: T::lit(param_f64(name, params, "amount", None)?),
            }),
            "fraction_of_asset" => {
                let id = params.get("asset").and_then(|v| v.as_str()).ok_or_else(|| CollError::BadParams {
                    name: name.into(),
                    reason: "missing asset id".into(),
                })?;
                let (asset, _) = model.asset(id)?;
                Ok(Functional::FractionOfAsset {
                    asset,
                    fraction: T::lit(param_f64(name, params, "fraction", None)?),
                })
            }
            "mark_proxy" => Ok(Functional::MarkProxy {
                scale: T::lit(param_f64(name, params, "scale", Some(1.0))?),
            }),
            other => Err(CollError::UnknownFunctional(other.into())),
        }
    }
}

/// Collateral path of an exogenous spec on every scenario path.
pub fn exogenous_path<T: Real>(
    scenario: &ScenarioSet<T>,
    contract: &Contract<T>,
    spec: &CollateralSpec,
) -> Result<CollateralPath<T>, CollError> {
    let CollateralMode::Exogenous { name, params } = &spec.mode else {
        return Err(CollError::EndogenousMode);
    };
    let model = scenario.model();
    let resolved = spec.check(model)?;
    let functional = Functional::resolve(model, name, params)?;
    let (np, nt) = (scenario.n_paths(), scenario.n_times());
    let k3 = resolved.k3;
    let mark_to_c = |m: T, p: usize, j: usize| collateral_from_mark(m, resolved.delta1, resolved.delta2, scenario.fx(p, k3, j));
    let mut values = vec![T::zero(); np * nt];
    match functional {
        Functional::Constant { amount } => values.iter_mut().for_each(|v| *v = amount),
        Functional::FractionOfAsset { asset, fraction } => {
            let ka = model.assets()[asset].currency;
            for p in 0..np {
                for j in 0..nt {
                    let m = fraction * scenario.fx(p, ka, j) * scenario.asset(p, asset, j);
                    values[p * nt + j] = mark_to_c(m, p, j)?;
                }
            }
        }
        Functional::MarkProxy { scale } => {
            let flows = contract.on_grid(scenario)?;
            let k2 = flows.currency;
            // Contract value seen by the hedger, sum_{i > j} a_i / B^{k2}_i, built backwards
            let mut tail = vec![T::zero(); nt];
            for j in (0..nt - 1).rev() {
                tail[j] = tail[j + 1] + flows.amounts[j + 1] / scenario.unsecured_account(k2, j + 1);
            }
            for p in 0..np {
                for j in 0..nt {
                    let m = scale * tail[j] * scenario.fx(p, k2, j) * scenario.unsecured_account(k2, j);
                    values[p * nt + j] = mark_to_c(m, p, j)?;
                }
            }
        }
    }
    Ok(CollateralPath::from_values(np, nt, k3, values))
}
