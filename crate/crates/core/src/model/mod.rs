//! Market model: currencies, rate curves, asset and FX specifications,
//! correlation, and validation into an immutable [`ValidatedModel`].

mod correlation;
mod curve;
mod document;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub use correlation::{factorize, min_eigenvalue, CorrelationMatrix, PSD_TOLERANCE};
pub use curve::{cash_account_value, CurveError, RateCurve, RATE_BOUND};
pub use document::{AssetDoc, CorrelationDoc, CurrencyDoc, CurveDoc, FxDoc, MarketModel};

/// Position of a currency in the model's currency list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CurrencyIndex(pub usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown currency {0:?}")]
    UnknownCurrency(String),
    #[error("currency {currency} has no {role} rate")]
    MissingRate { currency: String, role: RateRole },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("collateral borrow and lend rates differ for {0}")]
    AsymmetricCollateralRates(String),
    #[error("unknown asset {0:?}")]
    UnknownAsset(String),
    #[error("FX drift requested for the domestic currency {0}")]
    DomesticPairRequested(String),
}

/// Rate roles accepted in the `rates` section of a model document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRole {
    /// r^k: treasury borrowing and lending.
    Unsecured,
    /// r^{c,b}: paid on collateral received.
    CollateralBorrow,
    /// r^{c,l}: earned on collateral posted.
    CollateralLend,
    /// r^{d+1}: funding of a risky asset posted as collateral.
    CollPostFunding,
    /// r^{d+2,s}: reinvestment of segregated collateral. Zero when omitted.
    CollReinvestSeg,
    /// r^{d+2,h}: reinvestment of rehypothecated risky collateral.
    CollReinvestRehyp,
    /// r^{d+3}: funding of posted cash collateral.
    CashPostFunding,
}

impl RateRole {
    pub const ALL: [RateRole; 7] = [
        RateRole::Unsecured,
        RateRole::CollateralBorrow,
        RateRole::CollateralLend,
        RateRole::CollPostFunding,
        RateRole::CollReinvestSeg,
        RateRole::CollReinvestRehyp,
        RateRole::CashPostFunding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RateRole::Unsecured => "unsecured",
            RateRole::CollateralBorrow => "collateral_borrow",
            RateRole::CollateralLend => "collateral_lend",
            RateRole::CollPostFunding => "coll_post_funding",
            RateRole::CollReinvestSeg => "coll_reinvest_seg",
            RateRole::CollReinvestRehyp => "coll_reinvest_rehyp",
            RateRole::CashPostFunding => "cash_post_funding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for RateRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    NoCurrencies,
    DuplicateCurrency,
    NoDomestic,
    MultipleDomestic,
    UnknownCurrency,
    UnknownRateRole,
    MissingRate,
    BadCurve { reason: String },
    UnboundedRate { max_abs: f64 },
    NegativeVolatility { sigma: f64 },
    NonFiniteParameter,
    NonPositiveInitial { value: f64 },
    MissingFxPair,
    DuplicateFxPair,
    FxForDomestic,
    DuplicateAsset,
    ReservedAssetId,
    CorrelationShape,
    CorrelationLabelMismatch,
    CorrelationOutOfRange { value: f64 },
    NonSymmetric,
    NonUnitDiagonal,
    NonPsdCorrelation { min_eigenvalue: f64 },
}

/// One failed check, naming the offending field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.field, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("model validation failed with {} violation(s): {}", .violations.len(), summarize(.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn summarize(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl ValidationError {
    pub fn has(&self, pred: impl Fn(&ViolationKind) -> bool) -> bool {
        self.violations.iter().any(|v| pred(&v.kind))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetSpec<T: Real> {
    pub id: String,
    pub currency: CurrencyIndex,
    pub sigma: T,
    pub s0: T,
    pub dividend_yield: RateCurve<T>,
    pub repo_rate: RateCurve<T>,
    pub p_drift: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FxSpec<T: Real> {
    pub currency: CurrencyIndex,
    pub sigma: T,
    pub x0: T,
    pub p_drift: Option<T>,
}

/// Label of the FX driver for a foreign currency code.
pub fn fx_label(code: &str) -> String {
    format!("FX:{code}")
}

/// Validated, immutable market model. Cheap to share behind an `Arc`.
#[derive(Debug, Clone)]
pub struct ValidatedModel<T: Real> {
    codes: Vec<String>,
    domestic: CurrencyIndex,
    rates: Vec<BTreeMap<RateRole, RateCurve<T>>>,
    assets: Vec<AssetSpec<T>>,
    /// Ordered by currency index; the domestic currency has none.
    fx: Vec<FxSpec<T>>,
    correlation: CorrelationMatrix<T>,
    factor: Vec<T>,
    source: MarketModel,
}

impl<T: Real> ValidatedModel<T> {
    pub fn domestic(&self) -> CurrencyIndex {
        self.domestic
    }

    pub fn n_currencies(&self) -> usize {
        self.codes.len()
    }

    pub fn currency_code(&self, k: CurrencyIndex) -> &str {
        &self.codes[k.0]
    }

    pub fn currency(&self, code: &str) -> Result<CurrencyIndex, ModelError> {
        self.codes
            .iter()
            .position(|c| c == code)
            .map(CurrencyIndex)
            .ok_or_else(|| ModelError::UnknownCurrency(code.to_string()))
    }

    pub fn assets(&self) -> &[AssetSpec<T>] {
        &self.assets
    }

    pub fn asset(&self, id: &str) -> Result<(usize, &AssetSpec<T>), ModelError> {
        self.assets
            .iter()
            .enumerate()
            .find(|(_, a)| a.id == id)
            .ok_or_else(|| ModelError::UnknownAsset(id.to_string()))
    }

    pub fn fx_specs(&self) -> &[FxSpec<T>] {
        &self.fx
    }

    /// Position of `k` within [`fx_specs`](Self::fx_specs); `None` for the domestic currency.
    pub fn fx_position(&self, k: CurrencyIndex) -> Option<usize> {
        self.fx.iter().position(|f| f.currency == k)
    }

    pub fn fx_spec(&self, k: CurrencyIndex) -> Option<&FxSpec<T>> {
        self.fx_position(k).map(|p| &self.fx[p])
    }

    /// X^{e,k}_0; one for the domestic currency.
    pub fn fx_initial(&self, k: CurrencyIndex) -> T {
        self.fx_spec(k).map_or(T::one(), |f| f.x0)
    }

    /// Driver labels: assets first, then FX pairs in currency order.
    pub fn driver_labels(&self) -> &[String] {
        self.correlation.labels()
    }

    pub fn n_drivers(&self) -> usize {
        self.assets.len() + self.fx.len()
    }

    pub fn fx_driver(&self, k: CurrencyIndex) -> Option<usize> {
        self.fx_position(k).map(|p| self.assets.len() + p)
    }

    pub fn correlation(&self) -> &CorrelationMatrix<T> {
        &self.correlation
    }

    /// Row-major factor `F` with `F F^T = correlation`, in driver order.
    pub fn factor(&self) -> &[T] {
        &self.factor
    }

    pub fn source(&self) -> &MarketModel {
        &self.source
    }

    /// Validates the source document again; yields an identical model.
    pub fn revalidate(&self) -> Result<Self, ValidationError> {
        validate_model(&self.source)
    }

    pub fn rate(&self, k: CurrencyIndex, role: RateRole) -> Result<&RateCurve<T>, ModelError> {
        self.rates[k.0]
            .get(&role)
            .ok_or_else(|| ModelError::MissingRate {
                currency: self.codes[k.0].clone(),
                role,
            })
    }

    pub fn unsecured(&self, k: CurrencyIndex) -> &RateCurve<T> {
        self.rates[k.0]
            .get(&RateRole::Unsecured)
            .expect("validation requires an unsecured curve")
    }

    /// B^k(t) of the unsecured account.
    pub fn unsecured_account(&self, k: CurrencyIndex, t: T) -> Result<T, ModelError> {
        self.unsecured(k).cash_account(t)
    }

    /// Single collateral rate r^{c,k}, requiring borrow and lend to coincide.
    pub fn symmetric_collateral_rate(&self, k: CurrencyIndex) -> Result<&RateCurve<T>, ModelError> {
        let b = self.rate(k, RateRole::CollateralBorrow)?;
        let l = self.rate(k, RateRole::CollateralLend)?;
        if b != l && b.combine(l, |x, y| x - y).max_abs() != T::zero() {
            return Err(ModelError::AsymmetricCollateralRates(self.codes[k.0].clone()));
        }
        Ok(l)
    }

    /// q^{k0,k3} as a curve: (r^{k0} - r^{k3}) - (r^{c,k0} - r^{c,k3}), using lend rates.
    pub fn basis_curve(&self, k0: CurrencyIndex, k3: CurrencyIndex) -> Result<RateCurve<T>, ModelError> {
        if k0 == k3 {
            return Ok(RateCurve::zero());
        }
        let unsec = self.unsecured(k0).combine(self.unsecured(k3), |a, b| a - b);
        let coll = self
            .rate(k0, RateRole::CollateralLend)?
            .combine(self.rate(k3, RateRole::CollateralLend)?, |a, b| a - b);
        Ok(unsec.combine(&coll, |a, b| a - b))
    }

    /// q^{k0,k3}_t.
    pub fn basis_between(&self, k0: CurrencyIndex, k3: CurrencyIndex, t: T) -> Result<T, ModelError> {
        if t < T::zero() {
            return Err(ModelError::NegativeTime(t.to_f64_lossy()));
        }
        if k0 == k3 {
            return Ok(T::zero());
        }
        let r = |k, role| self.rate(k, role).map(|c| c.rate_at(t));
        Ok((self.unsecured(k0).rate_at(t) - self.unsecured(k3).rate_at(t))
            - (r(k0, RateRole::CollateralLend)? - r(k3, RateRole::CollateralLend)?))
    }

    /// Cross-currency basis q^{e,k3}_t against the domestic currency.
    pub fn cross_currency_basis(&self, k3: CurrencyIndex, t: T) -> Result<T, ModelError> {
        if k3.0 >= self.codes.len() {
            return Err(ModelError::UnknownCurrency(format!("#{}", k3.0)));
        }
        self.basis_between(self.domestic, k3, t)
    }

    /// `int_a^b q^{e,k3}`.
    pub fn basis_integral(&self, k3: CurrencyIndex, a: T, b: T) -> Result<T, ModelError> {
        Ok(self.basis_curve(self.domestic, k3)?.integral(a, b))
    }

    pub fn convert<U: Real>(&self) -> ValidatedModel<U> {
        validate_model(&self.source).expect("source document already validated")
    }
}

impl<T: Real> PartialEq for ValidatedModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
            && self.codes == other.codes
            && self.domestic == other.domestic
            && self.rates == other.rates
            && self.assets == other.assets
            && self.fx == other.fx
            && self.correlation == other.correlation
            && self.factor == other.factor
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, field: impl Into<String>, kind: ViolationKind) {
        self.violations.push(Violation {
            field: field.into(),
            kind,
        });
    }

    fn curve<T: Real>(&mut self, field: &str, doc: &CurveDoc) -> Option<RateCurve<T>> {
        let (k, v) = doc.parts();
        match RateCurve::new(k, v) {
            Ok(c) => {
                let m = c.max_abs();
                if m > RATE_BOUND {
                    self.push(field, ViolationKind::UnboundedRate { max_abs: m });
                }
                Some(c.convert())
            }
            Err(e) => {
                self.push(field, ViolationKind::BadCurve { reason: e.to_string() });
                None
            }
        }
    }

    fn volatility(&mut self, field: String, sigma: f64) {
        if !sigma.is_finite() {
            self.push(field, ViolationKind::NonFiniteParameter);
        } else if sigma < 0.0 {
            self.push(field, ViolationKind::NegativeVolatility { sigma });
        }
    }

    fn positive(&mut self, field: String, value: f64) {
        if !(value.is_finite() && value > 0.0) {
            self.push(field, ViolationKind::NonPositiveInitial { value });
        }
    }
}

/// Checks every structural and numerical requirement of a model document.
/// Returns all violations found, not just the first.
pub fn validate_model<T: Real>(doc: &MarketModel) -> Result<ValidatedModel<T>, ValidationError> {
    let mut ck = Checker { violations: Vec::new() };

    // currencies
    let codes: Vec<String> = doc.currencies.iter().map(|c| c.code.clone()).collect();
    if codes.is_empty() {
        ck.push("currencies", ViolationKind::NoCurrencies);
    }
    let mut seen = HashSet::new();
    for (i, c) in codes.iter().enumerate() {
        if !seen.insert(c.as_str()) {
            ck.push(format!("currencies[{i}].code"), ViolationKind::DuplicateCurrency);
        }
    }
    let domestic: Vec<usize> = (0..codes.len()).filter(|&i| doc.currencies[i].domestic).collect();
    match domestic.len() {
        0 if !codes.is_empty() => ck.push("currencies", ViolationKind::NoDomestic),
        0 | 1 => {}
        _ => ck.push("currencies", ViolationKind::MultipleDomestic),
    }
    let lookup = |code: &str| codes.iter().position(|c| c == code);

    // rates
    let mut rates: Vec<BTreeMap<RateRole, RateCurve<T>>> = vec![BTreeMap::new(); codes.len()];
    for (code, roles) in &doc.rates {
        let Some(k) = lookup(code) else {
            ck.push(format!("rates.{code}"), ViolationKind::UnknownCurrency);
            continue;
        };
        for (role_s, curve) in roles {
            let field = format!("rates.{code}.{role_s}");
            let Some(role) = RateRole::parse(role_s) else {
                ck.push(field, ViolationKind::UnknownRateRole);
                continue;
            };
            if let Some(c) = ck.curve::<T>(&field, curve) {
                rates[k].insert(role, c);
            }
        }
    }
    for (k, code) in codes.iter().enumerate() {
        let r = &mut rates[k];
        if !r.contains_key(&RateRole::Unsecured) {
            ck.push(format!("rates.{code}.unsecured"), ViolationKind::MissingRate);
        }
        // one-sided collateral rate stands for both sides
        match (
            r.get(&RateRole::CollateralBorrow).cloned(),
            r.get(&RateRole::CollateralLend).cloned(),
        ) {
            (Some(b), None) => {
                r.insert(RateRole::CollateralLend, b);
            }
            (None, Some(l)) => {
                r.insert(RateRole::CollateralBorrow, l);
            }
            _ => {}
        }
        r.entry(RateRole::CollReinvestSeg).or_insert_with(RateCurve::zero);
    }

    // assets
    let mut assets = Vec::new();
    let mut ids = HashSet::new();
    for (i, a) in doc.assets.iter().enumerate() {
        let f = |s: &str| format!("assets[{i}].{s}");
        if !ids.insert(a.id.as_str()) {
            ck.push(f("id"), ViolationKind::DuplicateAsset);
        }
        if a.id.starts_with("FX:") {
            ck.push(f("id"), ViolationKind::ReservedAssetId);
        }
        ck.volatility(f("sigma"), a.sigma);
        ck.positive(f("s0"), a.s0);
        if let Some(mu) = a.p_drift {
            if !mu.is_finite() {
                ck.push(f("p_drift"), ViolationKind::NonFiniteParameter);
            }
        }
        let kappa = match &a.dividend_yield {
            Some(d) => ck.curve::<T>(&f("dividend_yield"), d),
            None => Some(RateCurve::zero()),
        };
        let Some(k) = lookup(&a.currency) else {
            ck.push(f("currency"), ViolationKind::UnknownCurrency);
            continue;
        };
        let repo = match &a.repo_rate {
            Some(d) => ck.curve::<T>(&f("repo_rate"), d),
            None => rates[k].get(&RateRole::Unsecured).cloned(),
        };
        if let (Some(kappa), Some(repo)) = (kappa, repo) {
            assets.push(AssetSpec {
                id: a.id.clone(),
                currency: CurrencyIndex(k),
                sigma: T::lit(a.sigma),
                s0: T::lit(a.s0),
                dividend_yield: kappa,
                repo_rate: repo,
                p_drift: a.p_drift.map(T::lit),
            });
        }
    }

    // fx
    let mut fx_by_ccy: Vec<Option<FxSpec<T>>> = vec![None; codes.len()];
    for (i, x) in doc.fx.iter().enumerate() {
        let f = |s: &str| format!("fx[{i}].{s}");
        ck.volatility(f("sigma"), x.sigma);
        ck.positive(f("x0"), x.x0);
        let Some(k) = lookup(&x.currency) else {
            ck.push(f("currency"), ViolationKind::UnknownCurrency);
            continue;
        };
        if doc.currencies[k].domestic {
            ck.push(f("currency"), ViolationKind::FxForDomestic);
            continue;
        }
        if fx_by_ccy[k].is_some() {
            ck.push(f("currency"), ViolationKind::DuplicateFxPair);
            continue;
        }
        fx_by_ccy[k] = Some(FxSpec {
            currency: CurrencyIndex(k),
            sigma: T::lit(x.sigma),
            x0: T::lit(x.x0),
            p_drift: x.p_drift.map(T::lit),
        });
    }
    for (k, code) in codes.iter().enumerate() {
        if !doc.currencies[k].domestic && fx_by_ccy[k].is_none() {
            ck.push(format!("fx[{code}]"), ViolationKind::MissingFxPair);
        }
    }
    let fx: Vec<FxSpec<T>> = fx_by_ccy.into_iter().flatten().collect();

    // correlation, reordered into driver order
    let labels: Vec<String> = assets
        .iter()
        .map(|a| a.id.clone())
        .chain(fx.iter().map(|x| fx_label(&codes[x.currency.0])))
        .collect();
    let n = labels.len();
    let mut entries = vec![0.0f64; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0;
    }
    if let Some(c) = &doc.correlation {
        check_correlation(&mut ck, c, &labels, &mut entries);
    }

    if !ck.violations.is_empty() {
        return Err(ValidationError {
            violations: ck.violations,
        });
    }

    // clip tiny negative eigenvalues by construction of the factor
    let factor = factorize(n, &entries).into_iter().map(T::lit).collect();
    let correlation = CorrelationMatrix::from_parts(labels, entries.into_iter().map(T::lit).collect());
    Ok(ValidatedModel {
        codes,
        domestic: CurrencyIndex(domestic[0]),
        rates,
        assets,
        fx,
        correlation,
        factor,
        source: doc.clone(),
    })
}

fn check_correlation(ck: &mut Checker, c: &CorrelationDoc, labels: &[String], out: &mut [f64]) {
    let n = labels.len();
    let m = c.labels.len();
    if c.matrix.len() != m * m {
        ck.push("correlation.matrix", ViolationKind::CorrelationShape);
        return;
    }
    // map document position -> driver position
    let mut pos = Vec::with_capacity(m);
    let mut used = vec![false; n];
    for (i, l) in c.labels.iter().enumerate() {
        match labels.iter().position(|x| x == l) {
            Some(p) if !used[p] => {
                used[p] = true;
                pos.push(p);
            }
            _ => {
                ck.push(format!("correlation.labels[{i}]"), ViolationKind::CorrelationLabelMismatch);
                return;
            }
        }
    }
    if m != n {
        ck.push("correlation.labels", ViolationKind::CorrelationLabelMismatch);
        return;
    }
    let mut ok = true;
    for i in 0..m {
        for j in 0..m {
            let v = c.matrix[i * m + j];
            let field = || format!("correlation.matrix[{i}][{j}]");
            if !v.is_finite() || v.abs() > 1.0 {
                ck.push(field(), ViolationKind::CorrelationOutOfRange { value: v });
                ok &= v.is_finite();
            }
            if i == j && (v - 1.0).abs() > 1e-12 {
                ck.push(field(), ViolationKind::NonUnitDiagonal);
            }
            if j > i && (v - c.matrix[j * m + i]).abs() > 1e-12 {
                ck.push(field(), ViolationKind::NonSymmetric);
                ok = false;
            }
            out[pos[i] * n + pos[j]] = v;
        }
    }
    if ok {
        let lam = min_eigenvalue(n, out);
        if lam < PSD_TOLERANCE {
            ck.push("correlation.matrix", ViolationKind::NonPsdCorrelation { min_eigenvalue: lam });
        }
    }
}
