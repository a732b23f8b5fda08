//! JSON document form of a market model, before validation.
//!
//! ```json
//! {
//!   "currencies": [{"code": "EUR", "domestic": true}, {"code": "USD"}],
//!   "rates": {
//!     "EUR": {"unsecured": 0.02, "collateral_lend": 0.015, "collateral_borrow": 0.015},
//!     "USD": {"unsecured": {"knots": [0, 1], "values": [0.03, 0.035]}}
//!   },
//!   "assets": [{"id": "SX5E", "currency": "EUR", "sigma": 0.2, "s0": 100,
//!               "dividend_yield": 0.01, "repo_rate": 0.018}],
//!   "fx": [{"currency": "USD", "sigma": 0.1, "x0": 0.9}],
//!   "correlation": {"labels": ["SX5E", "FX:USD"], "matrix": [1, 0.3, 0.3, 1]}
//! }
//! ```
//!
//! A curve is either a flat number or `{"knots": [...], "values": [...]}`.
//! Rate roles are listed in [`RateRole`](super::RateRole).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveDoc {
    Flat(f64),
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
}

impl From<f64> for CurveDoc {
    fn from(r: f64) -> Self {
        CurveDoc::Flat(r)
    }
}

impl CurveDoc {
    pub fn parts(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            CurveDoc::Flat(r) => (vec![0.0], vec![*r]),
            CurveDoc::Piecewise { knots, values } => (knots.clone(), values.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrencyDoc {
    pub code: String,
    #[serde(default)]
    pub domestic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetDoc {
    pub id: String,
    pub currency: String,
    pub sigma: f64,
    pub s0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dividend_yield: Option<CurveDoc>,
    /// Defaults to the unsecured curve of the asset's currency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo_rate: Option<CurveDoc>,
    /// Physical-measure drift; only used when simulating under the physical measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FxDoc {
    /// Foreign currency; the rate is quoted as domestic units per one foreign unit.
    pub currency: String,
    pub sigma: f64,
    pub x0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDoc {
    pub labels: Vec<String>,
    /// Row-major, `labels.len()^2` entries.
    pub matrix: Vec<f64>,
}

/// Unvalidated market model, as read from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub currencies: Vec<CurrencyDoc>,
    /// currency code -> role -> curve
    #[serde(default)]
    pub rates: BTreeMap<String, BTreeMap<String, CurveDoc>>,
    #[serde(default)]
    pub assets: Vec<AssetDoc>,
    #[serde(default)]
    pub fx: Vec<FxDoc>,
    /// Identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationDoc>,
}

impl MarketModel {
    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    // Builder helpers, mostly for tests and examples.

    pub fn with_currency(mut self, code: &str, domestic: bool) -> Self {
        self.currencies.push(CurrencyDoc {
            code: code.into(),
            domestic,
        });
        self
    }

    pub fn with_rate(mut self, code: &str, role: &str, curve: impl Into<CurveDoc>) -> Self {
        self.rates
            .entry(code.into())
            .or_default()
            .insert(role.into(), curve.into());
        self
    }

    pub fn with_asset(mut self, asset: AssetDoc) -> Self {
        self.assets.push(asset);
        self
    }

    pub fn with_fx(mut self, currency: &str, sigma: f64, x0: f64) -> Self {
        self.fx.push(FxDoc {
            currency: currency.into(),
            sigma,
            x0,
            p_drift: None,
        });
        self
    }

    pub fn with_correlation(mut self, labels: &[&str], matrix: Vec<f64>) -> Self {
        self.correlation = Some(CorrelationDoc {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            matrix,
        });
        self
    }
}

impl AssetDoc {
    pub fn new(id: &str, currency: &str, sigma: f64, s0: f64) -> Self {
        Self {
            id: id.into(),
            currency: currency.into(),
            sigma,
            s0,
            dividend_yield: None,
            repo_rate: None,
            p_drift: None,
        }
    }

    pub fn dividend(mut self, curve: impl Into<CurveDoc>) -> Self {
        self.dividend_yield = Some(curve.into());
        self
    }

    pub fn repo(mut self, curve: impl Into<CurveDoc>) -> Self {
        self.repo_rate = Some(curve.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_and_piecewise_curves() {
        let doc = r#"{
            "currencies": [{"code": "EUR", "domestic": true}, {"code": "USD"}],
            "rates": {"EUR": {"unsecured": 0.02},
                      "USD": {"unsecured": {"knots": [0, 1], "values": [0.03, 0.035]}}},
            "fx": [{"currency": "USD", "sigma": 0.1, "x0": 0.9}]
        }"#;
        let m = MarketModel::from_json(doc).unwrap();
        assert_eq!(m.rates["EUR"]["unsecured"], CurveDoc::Flat(0.02));
        assert_eq!(
            m.rates["USD"]["unsecured"].parts(),
            (vec![0.0, 1.0], vec![0.03, 0.035])
        );
        assert!(!m.currencies[1].domestic);
        assert!(m.correlation.is_none());
    }

    #[test]
    fn json_roundtrip_preserves_document() {
        let m = MarketModel::default()
            .with_currency("EUR", true)
            .with_rate("EUR", "unsecured", 0.01)
            .with_asset(AssetDoc::new("A", "EUR", 0.2, 100.0).dividend(0.01));
        assert_eq!(MarketModel::from_json(&m.to_json()).unwrap(), m);
    }
}
