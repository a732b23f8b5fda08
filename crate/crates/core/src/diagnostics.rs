//! Statistical no-arbitrage checks and single-currency consistency checks.
//!
//! Zero drift is tested at checkpoints, i.e. processes are treated as true
//! martingales; a local martingale that is not a true one cannot be told
//! apart statistically.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collateral::{adjustment_increments, CollError, CollateralPath, CollateralSpec, ConventionKind, FxTerm};
use crate::model::{validate_model, AssetDoc, CurveDoc, RateRole, ValidatedModel, ValidationError};
use crate::pathfunc::{discounted_flows, discounted_gain_increment, gain_increment, Contract, PathError};
use crate::pricing::{price_exogenous, PriceError, PriceOptions};
use crate::scalar::{mean_and_stderr, Real};
use crate::simulation::{simulate, Measure, ScenarioSet, SimError, TimeGrid};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagError {
    #[error("unknown process id {0:?}")]
    UnknownProcessId(String),
    #[error("checkpoint {0} is outside the grid")]
    BadCheckpoint(usize),
    #[error("the reduction suite needs a single-currency model, got {0} currencies")]
    NotSingleCurrency(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Price(#[from] PriceError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Collateral(#[from] CollError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub index: usize,
    pub time: f64,
    pub mean: f64,
    pub std_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub process_id: String,
    pub n_paths: usize,
    pub seed: u64,
    pub measure: Measure,
    pub threshold: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub pass: bool,
}

impl TestReport {
    pub fn max_abs_z(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.z.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleConfig {
    /// Grid node indices to test; empty means four evenly spaced nodes ending at the horizon.
    pub checkpoints: Vec<usize>,
    /// Largest accepted `|z|`.
    pub threshold: f64,
}

impl Default for MartingaleConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            threshold: 3.0,
        }
    }
}

enum Process {
    Unit,
    /// `X^{e,k} B^k / B^e`
    Fx(usize),
    /// Discounted gain of an asset.
    Asset(usize),
    /// Gain net of the FX exposure of the spot, `K - int S dX`.
    Gain(usize),
}

/// Every process id the martingale test accepts for `model`.
pub fn process_ids<T: Real>(model: &ValidatedModel<T>) -> Vec<String> {
    let mut ids = vec!["unit".to_string()];
    for f in model.fx_specs() {
        ids.push(format!("fx:{}", model.currency_code(f.currency)));
    }
    for a in model.assets() {
        ids.push(format!("asset:{}", a.id));
    }
    for a in model.assets() {
        ids.push(format!("gain:{}", a.id));
    }
    ids
}

fn parse_process<T: Real>(model: &ValidatedModel<T>, id: &str) -> Result<Process, DiagError> {
    let unknown = || DiagError::UnknownProcessId(id.to_string());
    if id == "unit" {
        return Ok(Process::Unit);
    }
    let (kind, name) = id.split_once(':').ok_or_else(unknown)?;
    match kind {
        "fx" => {
            let k = model.currency(name).map_err(|_| unknown())?;
            Ok(if k == model.domestic() { Process::Unit } else { Process::Fx(k.0) })
        }
        "asset" => Ok(Process::Asset(model.asset(name).map_err(|_| unknown())?.0)),
        "gain" => Ok(Process::Gain(model.asset(name).map_err(|_| unknown())?.0)),
        _ => Err(unknown()),
    }
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(mean)
    }
}

/// Tests that the increment of `process_id` from time 0 has zero mean at each checkpoint.
pub fn martingale_test<T: Real>(
    scenario: &ScenarioSet<T>,
    process_id: &str,
    cfg: &MartingaleConfig,
) -> Result<TestReport, DiagError> {
    let model = scenario.model();
    let process = parse_process(model, process_id)?;
    let nt = scenario.n_times();
    let checkpoints: Vec<usize> = if cfg.checkpoints.is_empty() {
        let n = nt - 1;
        let mut c: Vec<usize> = (1..=4).map(|i| (n * i).div_ceil(4).max(1)).collect();
        c.dedup();
        c
    } else {
        cfg.checkpoints.clone()
    };
    if let Some(&bad) = checkpoints.iter().find(|&&j| j >= nt) {
        return Err(DiagError::BadCheckpoint(bad));
    }

    // increments from 0 at every node, per path
    let paths: Vec<Vec<f64>> = (0..scenario.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = vec![0.0; nt];
            match process {
                Process::Unit => {}
                Process::Fx(k) => {
                    let k = crate::model::CurrencyIndex(k);
                    let y = |j| scenario.fx(p, k, j) * scenario.unsecured_account(k, j) / scenario.domestic_account(j);
                    let y0 = y(0);
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = (y(j) - y0).to_f64_lossy();
                    }
                }
                Process::Asset(i) => {
                    let mut acc = T::zero();
                    for j in 0..nt - 1 {
                        acc = acc + discounted_gain_increment(scenario, i, p, j);
                        out[j + 1] = acc.to_f64_lossy();
                    }
                }
                Process::Gain(i) => {
                    let k1 = model.assets()[i].currency;
                    let mut acc = T::zero();
                    for j in 0..nt - 1 {
                        let dx = scenario.fx(p, k1, j + 1) - scenario.fx(p, k1, j);
                        acc = acc + gain_increment(scenario, i, p, j) - scenario.asset(p, i, j) * dx;
                        out[j + 1] = acc.to_f64_lossy();
                    }
                }
            }
            out
        })
        .collect();

    let times = scenario.grid().times();
    let stats: Vec<Checkpoint> = checkpoints
        .iter()
        .map(|&j| {
            let xs: Vec<f64> = paths.iter().map(|v| v[j]).collect();
            let (mean, std_error) = mean_and_stderr(&xs);
            Checkpoint {
                index: j,
                time: times[j].to_f64_lossy(),
                mean,
                std_error,
                z: z_score(mean, std_error),
            }
        })
        .collect();
    let pass = stats.iter().all(|c| c.z.abs() <= cfg.threshold);
    Ok(TestReport {
        process_id: process_id.to_string(),
        n_paths: scenario.n_paths(),
        seed: scenario.seed(),
        measure: scenario.measure(),
        threshold: cfg.threshold,
        checkpoints: stats,
        pass,
    })
}

/// Runs [`martingale_test`] for every process of the scenario's model.
pub fn martingale_suite<T: Real>(scenario: &ScenarioSet<T>, cfg: &MartingaleConfig) -> Result<Vec<TestReport>, DiagError> {
    process_ids(scenario.model())
        .par_iter()
        .map(|id| martingale_test(scenario, id, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub n_paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            n_paths: 2000,
            steps: 12,
            horizon: 1.0,
            seed: 1,
        }
    }
}

const RELATIVE_TOL: f64 = 1e-12;

/// Single-currency consistency checks over all four collateral conventions.
///
/// Collateral rates absent from the model are filled with the unsecured
/// curve, and a collateral asset is added if the model has none; neither
/// affects the quantities checked.
pub fn reduction_suite<T: Real>(model: &ValidatedModel<T>, cfg: &ReductionConfig) -> Result<SuiteReport, DiagError> {
    if model.n_currencies() != 1 {
        return Err(DiagError::NotSingleCurrency(model.n_currencies()));
    }
    let mut doc = model.source().clone();
    let code = doc.currencies[0].code.clone();
    let rates = doc.rates.entry(code.clone()).or_default();
    let unsecured = rates.get(RateRole::Unsecured.as_str()).cloned().unwrap_or(CurveDoc::Flat(0.0));
    for role in RateRole::ALL {
        rates.entry(role.as_str().to_string()).or_insert_with(|| unsecured.clone());
    }
    if doc.assets.is_empty() {
        doc.assets.push(AssetDoc::new("collateral-asset", &code, 0.2, 100.0));
    }
    let collateral_asset = doc.assets[0].id.clone();
    let full = Arc::new(validate_model::<T>(&doc)?);
    let grid = TimeGrid::uniform(T::lit(cfg.horizon), cfg.steps)?;
    let s = simulate(full, &grid, cfg.n_paths, cfg.seed, Measure::RiskNeutral)?;
    let nt = s.n_times();

    let mut contract = Contract::new(&code);
    for j in 1..nt {
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        contract = contract.with_flow(grid.times()[j], T::lit(sign * (1.0 + j as f64)));
    }
    let k = s.model().domestic();
    let coll = CollateralPath::from_fn(&s, k, |p, j| T::lit(((p * 7 + j * 3) % 11) as f64 - 5.0));

    let mut checks = Vec::new();
    for kind in ConventionKind::ALL {
        let spec = CollateralSpec::of_kind(kind, &code, &collateral_asset)
            .exogenous("constant", serde_json::json!({"amount": 0.0}));
        let resolved = spec.check(s.model())?;
        let mut nonzero = 0usize;
        for term in [FxTerm::Increment, FxTerm::Drift] {
            let inc = adjustment_increments(&s, &coll, &resolved, term)?;
            nonzero += inc.fx.iter().filter(|&&v| v != T::zero()).count();
        }
        let report = price_exogenous(&s, &contract, &coll, &spec, PriceOptions::default())?;
        let fx_leg = report.legs.fx_correction;
        checks.push(CheckResult {
            name: format!("fx-term-vanishes/{kind}"),
            pass: nonzero == 0 && fx_leg == T::zero(),
            detail: format!("{nonzero} nonzero FX increments, priced FX correction {fx_leg}"),
        });
    }

    let spec = CollateralSpec::cash(&code, crate::collateral::Convention::Rehypothecation)
        .exogenous("constant", serde_json::json!({"amount": 0.0}));
    let zero = CollateralPath::zero(&s, k);
    let report = price_exogenous(&s, &contract, &zero, &spec, PriceOptions::default())?;
    let flows = discounted_flows(&s, &contract, T::zero())?;
    let direct = -(crate::scalar::pairwise_sum(&flows) / T::from_usize_lossy(flows.len()));
    checks.push(CheckResult {
        name: "uncollateralized-price-is-discounted-flows".into(),
        pass: report.price == direct && report.legs.collateral == T::zero(),
        detail: format!("price {} vs {}", report.price, direct),
    });

    let times = grid.times();
    let mut worst = 0.0f64;
    for (i, a) in s.model().assets().iter().enumerate() {
        for p in 0..s.n_paths() {
            for j in 0..nt - 1 {
                let (s0, s1) = (s.asset(p, i, j), s.asset(p, i, j + 1));
                let expected = (s1 - s0) - s0 * a.repo_rate.integral(times[j], times[j + 1]).exp_m1()
                    + a.dividend_yield.integral(times[j], times[j + 1]) * s0;
                let got = gain_increment(&s, i, p, j);
                let scale = s0.abs().max(T::one()).to_f64_lossy();
                worst = worst.max((got - expected).abs().to_f64_lossy() / scale);
            }
        }
    }
    checks.push(CheckResult {
        name: "gain-process-single-currency-form".into(),
        pass: worst <= RELATIVE_TOL,
        detail: format!("max relative difference {worst:e}"),
    });

    let pass = checks.iter().all(|c| c.pass);
    Ok(SuiteReport { checks, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarketModel;

    fn model(doc: &MarketModel) -> Arc<ValidatedModel<f64>> {
        Arc::new(validate_model(doc).unwrap())
    }

    fn fx_doc(p_drift: Option<f64>) -> MarketModel {
        let mut d = MarketModel::default()
            .with_currency("EUR", true)
            .with_currency("USD", false)
            .with_rate("EUR", "unsecured", 0.02)
            .with_rate("USD", "unsecured", 0.05)
            .with_asset(AssetDoc::new("A", "USD", 0.25, 10.0).dividend(0.01))
            .with_fx("USD", 0.1, 1.2);
        d.fx[0].p_drift = p_drift;
        d
    }

    fn scenario(doc: &MarketModel, measure: Measure) -> ScenarioSet<f64> {
        simulate(model(doc), &TimeGrid::uniform(1.0, 8).unwrap(), 100_000, 17, measure).unwrap()
    }

    #[test]
    fn unit_process_is_exactly_zero() {
        let s = scenario(&fx_doc(None), Measure::RiskNeutral);
        let r = martingale_test(&s, "unit", &MartingaleConfig::default()).unwrap();
        assert!(r.pass);
        assert!(r.checkpoints.iter().all(|c| c.z == 0.0));
        assert_eq!(r.checkpoints.len(), 4);
    }

    #[test]
    fn risk_neutral_processes_pass_and_drifted_fx_fails() {
        let s = scenario(&fx_doc(None), Measure::RiskNeutral);
        for r in martingale_suite(&s, &MartingaleConfig::default()).unwrap() {
            assert!(r.pass, "{} max z {}", r.process_id, r.max_abs_z());
        }
        let p = scenario(&fx_doc(Some(0.02 - 0.03)), Measure::Physical);
        let r = martingale_test(&p, "fx:USD", &MartingaleConfig::default()).unwrap();
        assert!(!r.pass);
        assert!(r.max_abs_z() > 10.0);
    }

    #[test]
    fn unknown_ids_and_checkpoints() {
        let s = simulate(model(&fx_doc(None)), &TimeGrid::uniform(1.0, 2).unwrap(), 10, 1, Measure::RiskNeutral).unwrap();
        for id in ["fx:JPY", "asset:B", "vol:A", "x"] {
            assert!(matches!(
                martingale_test(&s, id, &MartingaleConfig::default()),
                Err(DiagError::UnknownProcessId(_))
            ));
        }
        let cfg = MartingaleConfig {
            checkpoints: vec![3],
            threshold: 3.0,
        };
        assert_eq!(martingale_test(&s, "unit", &cfg), Err(DiagError::BadCheckpoint(3)));
    }

    #[test]
    fn reduction_suite_passes_for_single_currency() {
        let d = MarketModel::default()
            .with_currency("EUR", true)
            .with_rate("EUR", "unsecured", 0.03)
            .with_asset(AssetDoc::new("S", "EUR", 0.3, 50.0).dividend(0.02).repo(0.025));
        let r = reduction_suite(&validate_model::<f64>(&d).unwrap(), &ReductionConfig::default()).unwrap();
        assert!(r.pass, "{:#?}", r.checks);
        assert_eq!(r.checks.len(), 6);
        assert!(matches!(
            reduction_suite(&validate_model::<f64>(&fx_doc(None)).unwrap(), &ReductionConfig::default()),
            Err(DiagError::NotSingleCurrency(2))
        ));
    }
}
