//! Path functionals: discounted contractual flows, asset gain processes and
//! the self-financing wealth replay, with and without collateral.
//!
//! Stochastic integrals use left-point (predictable) integrands, and the
//! bracket `d[S, X]` is the product of same-interval increments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collateral::{adjustment_increments, collateral_wealth, CollError, CollateralPath, FxTerm, ResolvedSpec};
use crate::model::{CurrencyIndex, ModelError};
use crate::scalar::Real;
use crate::simulation::ScenarioSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("flow at t={0} is not on the simulation grid")]
    FlowOffGrid(f64),
    #[error("strategy or collateral does not match the scenario grid: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing collateral rates: {0}")]
    MissingCollateralRates(String),
    #[error(transparent)]
    Collateral(Box<CollError>),
}

impl From<CollError> for PathError {
    fn from(e: CollError) -> Self {
        match e {
            CollError::MissingRates(m) => PathError::MissingCollateralRates(m.to_string()),
            CollError::GridMismatch { expected, got } => {
                PathError::GridMismatch(format!("expected {expected:?}, got {got:?}"))
            }
            other => PathError::Collateral(Box::new(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Flow<T: Real> {
    pub time: T,
    /// Signed amount in the contract currency; positive means the hedger receives it.
    pub amount: T,
}

/// A bilateral contract as dated lump flows in one currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Contract<T: Real> {
    /// Contract currency k2.
    pub currency: String,
    #[serde(default)]
    pub flows: Vec<Flow<T>>,
    /// Amount received by the hedger at inception, in the contract currency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_price: Option<T>,
}

/// Contract flows aggregated onto grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFlows<T: Real> {
    pub currency: CurrencyIndex,
    /// Amount at each node; node 0 includes the initial price.
    pub amounts: Vec<T>,
}

impl<T: Real> Contract<T> {
    pub fn new(currency: &str) -> Self {
        Self {
            currency: currency.into(),
            flows: Vec::new(),
            initial_price: None,
        }
    }

    pub fn with_flow(mut self, time: T, amount: T) -> Self {
        self.flows.push(Flow { time, amount });
        self.flows
            .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
        self
    }

    pub fn with_initial_price(mut self, p: T) -> Self {
        self.initial_price = Some(p);
        self
    }

    pub fn flow_times(&self) -> Vec<T> {
        self.flows.iter().map(|f| f.time).collect()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            currency: self.currency.clone(),
            flows: self
                .flows
                .iter()
                .map(|f| Flow {
                    time: f.time,
                    amount: f.amount * c,
                })
                .collect(),
            initial_price: self.initial_price.map(|p| p * c),
        }
    }

    /// Union of the flows of two contracts in the same currency.
    pub fn combined(&self, other: &Self) -> Option<Self> {
        if self.currency != other.currency {
            return None;
        }
        let mut out = self.clone();
        for f in &other.flows {
            out = out.with_flow(f.time, f.amount);
        }
        out.initial_price = match (self.initial_price, other.initial_price) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or_else(T::zero) + b.unwrap_or_else(T::zero)),
        };
        Some(out)
    }

    pub fn on_grid(&self, scenario: &ScenarioSet<T>) -> Result<NodeFlows<T>, PathError> {
        let currency = scenario.model().currency(&self.currency)?;
        let mut amounts = vec![T::zero(); scenario.n_times()];
        for f in &self.flows {
            let j = scenario
                .grid()
                .index_of(f.time)
                .ok_or(PathError::FlowOffGrid(f.time.to_f64_lossy()))?;
            amounts[j] = amounts[j] + f.amount;
        }
        if let Some(p) = self.initial_price {
            amounts[0] = amounts[0] + p;
        }
        Ok(NodeFlows { currency, amounts })
    }
}

/// `sum_{t_j > from_t} a_j X^{e,k2}_{t_j} / B^e_{t_j}` on every path.
pub fn discounted_flows<T: Real>(scenario: &ScenarioSet<T>, contract: &Contract<T>, from_t: T) -> Result<Vec<T>, PathError> {
    let flows = contract.on_grid(scenario)?;
    let times = scenario.grid().times();
    let nodes: Vec<(usize, T)> = flows
        .amounts
        .iter()
        .enumerate()
        .filter(|&(j, &a)| times[j] > from_t && a != T::zero())
        .map(|(j, &a)| (j, a / scenario.domestic_account(j)))
        .collect();
    Ok((0..scenario.n_paths())
        .into_par_iter()
        .map(|p| {
            nodes
                .iter()
                .fold(T::zero(), |acc, &(j, a)| acc + a * scenario.fx(p, flows.currency, j))
        })
        .collect())
}

/// Increment of the gain process `K^{i,e,k1}` over `(t_j, t_{j+1}]`, in domestic units:
/// `X dS + X S kappa dt - X S dB^i/B^i + S dX + dS dX`.
pub fn gain_increment<T: Real>(scenario: &ScenarioSet<T>, asset: usize, p: usize, j: usize) -> T {
    let spec = &scenario.model().assets()[asset];
    let t = scenario.grid().times();
    let k1 = spec.currency;
    let (s0, s1) = (scenario.asset(p, asset, j), scenario.asset(p, asset, j + 1));
    let (x0, x1) = (scenario.fx(p, k1, j), scenario.fx(p, k1, j + 1));
    let (ds, dx) = (s1 - s0, x1 - x0);
    let kappa = spec.dividend_yield.integral(t[j], t[j + 1]);
    let repo = spec.repo_rate.integral(t[j], t[j + 1]).exp_m1();
    x0 * ds + x0 * s0 * kappa - x0 * s0 * repo + s0 * dx + ds * dx
}

/// Increment of the asset's discounted gain martingale over `(t_j, t_{j+1}]`:
/// `X d(S/B^i) + X (S/B^i) kappa dt + d(S/B^i) dX`.
pub fn discounted_gain_increment<T: Real>(scenario: &ScenarioSet<T>, asset: usize, p: usize, j: usize) -> T {
    let spec = &scenario.model().assets()[asset];
    let t = scenario.grid().times();
    let k1 = spec.currency;
    let y0 = scenario.asset(p, asset, j) / scenario.repo_account(asset, j);
    let y1 = scenario.asset(p, asset, j + 1) / scenario.repo_account(asset, j + 1);
    let (x0, x1) = (scenario.fx(p, k1, j), scenario.fx(p, k1, j + 1));
    let kappa = spec.dividend_yield.integral(t[j], t[j + 1]);
    x0 * (y1 - y0) + x0 * y0 * kappa + (y1 - y0) * (x1 - x0)
}

/// Holdings on `(t_j, t_{j+1}]`, fixed at `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Positions<T: Real> {
    /// Units of each asset.
    pub xi: Vec<T>,
    /// Units of each asset's repo account.
    pub psi: Vec<T>,
    /// Units of each currency's unsecured account; the domestic entry is unused
    /// since domestic cash is the residual of wealth.
    pub psi0: Vec<T>,
}

impl<T: Real> Positions<T> {
    pub fn zeros(n_assets: usize, n_currencies: usize) -> Self {
        Self {
            xi: vec![T::zero(); n_assets],
            psi: vec![T::zero(); n_assets],
            psi0: vec![T::zero(); n_currencies],
        }
    }
}

/// A predictable trading strategy on the scenario grid.
pub trait Strategy<T: Real>: Sync {
    /// Fills the holdings chosen at node `j` of path `p`.
    fn positions(&self, scenario: &ScenarioSet<T>, p: usize, j: usize, out: &mut Positions<T>);
}

/// Holdings scheduled per grid node and shared by all paths. With the repo
/// constraint, each asset's repo holding is `-xi S / B^i` on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStrategy<T: Real> {
    /// `[asset][j]`
    pub xi: Vec<Vec<T>>,
    /// `[asset][j]`; ignored under the repo constraint.
    pub psi: Vec<Vec<T>>,
    /// `[currency][j]`
    pub psi0: Vec<Vec<T>>,
    pub repo_constrained: bool,
}

impl<T: Real> ScheduleStrategy<T> {
    pub fn zero(n_assets: usize, n_currencies: usize, n_times: usize) -> Self {
        Self {
            xi: vec![vec![T::zero(); n_times]; n_assets],
            psi: vec![vec![T::zero(); n_times]; n_assets],
            psi0: vec![vec![T::zero(); n_times]; n_currencies],
            repo_constrained: false,
        }
    }

    /// Constant holdings over the whole grid.
    pub fn constant(xi: &[T], psi: &[T], psi0: &[T], n_times: usize) -> Self {
        let rep = |v: &[T]| v.iter().map(|&x| vec![x; n_times]).collect();
        Self {
            xi: rep(xi),
            psi: rep(psi),
            psi0: rep(psi0),
            repo_constrained: false,
        }
    }

    pub fn repo_constrained(mut self) -> Self {
        self.repo_constrained = true;
        self
    }

    pub fn scaled(&self, c: T) -> Self {
        let sc = |m: &Vec<Vec<T>>| m.iter().map(|r| r.iter().map(|&x| x * c).collect()).collect();
        Self {
            xi: sc(&self.xi),
            psi: sc(&self.psi),
            psi0: sc(&self.psi0),
            repo_constrained: self.repo_constrained,
        }
    }
}

impl<T: Real> Strategy<T> for ScheduleStrategy<T> {
    fn positions(&self, scenario: &ScenarioSet<T>, p: usize, j: usize, out: &mut Positions<T>) {
        for i in 0..out.xi.len() {
            out.xi[i] = self.xi[i][j];
            out.psi[i] = if self.repo_constrained {
                -self.xi[i][j] * scenario.asset(p, i, j) / scenario.repo_account(i, j)
            } else {
                self.psi[i][j]
            };
        }
        for k in 0..out.psi0.len() {
            out.psi0[k] = self.psi0[k][j];
        }
    }
}

/// Collateral supplied to a wealth replay.
#[derive(Debug, Clone, Copy)]
pub struct CollateralLeg<'a, T: Real> {
    pub path: &'a CollateralPath<T>,
    pub spec: &'a ResolvedSpec<T>,
}

/// Wealth processes in domestic units, `[path * n_times + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath<T: Real> {
    pub n_paths: usize,
    pub n_times: usize,
    /// Hedger's wealth V.
    pub v: Vec<T>,
    /// Portfolio value V^p.
    pub v_p: Vec<T>,
    /// Collateral adjustment V^c.
    pub v_c: Vec<T>,
    /// Netted wealth.
    pub v_net: Vec<T>,
}

impl<T: Real> WealthPath<T> {
    pub fn at(&self, p: usize, j: usize) -> usize {
        p * self.n_times + j
    }

    pub fn terminal(&self, p: usize) -> T {
        self.v[self.at(p, self.n_times - 1)]
    }
}

/// Replays the wealth of a self-financing strategy with endowment `x`,
/// contract flows and optional collateral:
///
/// `V_{j+1} = V_j B^e_{j+1}/B^e_j + sum xi dK + sum (B^e/B^i) zeta X d(B^i/B^e)
///  + sum B^i psi dX + sum_{k != e} B^e psi^{0,k} d(X B^k / B^e) + dA^e + dF`
///
/// where `zeta = psi B^i + xi S` and `dF` is the collateral stream (plus the
/// gain on posted shares for risky collateral).
pub fn replay_wealth<T: Real>(
    scenario: &ScenarioSet<T>,
    strategy: &dyn Strategy<T>,
    contract: &Contract<T>,
    x: T,
    collateral: Option<CollateralLeg<'_, T>>,
) -> Result<WealthPath<T>, PathError> {
    let model = scenario.model();
    let flows = contract.on_grid(scenario)?;
    let (np, nt) = (scenario.n_paths(), scenario.n_times());
    let na = model.assets().len();
    let nc = model.n_currencies();
    let e = model.domestic();

    let stream = match &collateral {
        Some(leg) => Some(adjustment_increments(scenario, leg.path, leg.spec, FxTerm::Increment)?),
        None => None,
    };
    let growth: Vec<T> = (0..nt - 1)
        .map(|j| scenario.domestic_account(j + 1) / scenario.domestic_account(j))
        .collect();

    let per_path: Vec<[Vec<T>; 4]> = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut pos = Positions::zeros(na, nc);
            let mut v = vec![T::zero(); nt];
            let mut w = vec![T::zero(); nt];
            let mut vc = vec![T::zero(); nt];
            let a = |j: usize| flows.amounts[j] * scenario.fx(p, flows.currency, j);
            v[0] = x + a(0);
            w[0] = -a(0);
            for j in 0..nt - 1 {
                strategy.positions(scenario, p, j, &mut pos);
                let be0 = scenario.domestic_account(j);
                let be1 = scenario.domestic_account(j + 1);
                let mut dv = T::zero();
                for i in 0..na {
                    let k1 = model.assets()[i].currency;
                    let (x0, x1) = (scenario.fx(p, k1, j), scenario.fx(p, k1, j + 1));
                    let (bi0, bi1) = (scenario.repo_account(i, j), scenario.repo_account(i, j + 1));
                    let zeta = pos.psi[i] * bi0 + pos.xi[i] * scenario.asset(p, i, j);
                    dv = dv + pos.xi[i] * gain_increment(scenario, i, p, j);
                    dv = dv + be0 / bi0 * zeta * x0 * (bi1 / be1 - bi0 / be0);
                    dv = dv + bi0 * pos.psi[i] * (x1 - x0);
                }
                for k in (0..nc).filter(|&k| k != e.0) {
                    let k = CurrencyIndex(k);
                    let y = |jj: usize| scenario.fx(p, k, jj) * scenario.unsecured_account(k, jj) / scenario.domestic_account(jj);
                    dv = dv + be0 * pos.psi0[k.0] * (y(j + 1) - y(j));
                }
                if let (Some(leg), Some(stream)) = (&collateral, &stream) {
                    dv = dv + stream.total(p, j);
                    if let Some(d) = leg.spec.asset {
                        let s = scenario.asset(p, d, j);
                        let k3 = leg.spec.k3;
                        let dx = scenario.fx(p, k3, j + 1) - scenario.fx(p, k3, j);
                        dv = dv + leg.path.posted(p, j) / s * (gain_increment(scenario, d, p, j) - s * dx);
                    }
                }
                v[j + 1] = v[j] * growth[j] + dv + a(j + 1);
                w[j + 1] = w[j] * growth[j] - a(j + 1);
            }
            if let Some(leg) = &collateral {
                for (j, c) in vc.iter_mut().enumerate() {
                    *c = collateral_wealth(leg.spec.kind, scenario.fx(p, leg.spec.k3, j), leg.path.get(p, j));
                }
            }
            let vp = v.iter().zip(&vc).map(|(&a, &b)| a - b).collect();
            let vnet = v.iter().zip(&w).map(|(&a, &b)| a + b).collect();
            [v, vp, vc, vnet]
        })
        .collect();

    let mut out = WealthPath {
        n_paths: np,
        n_times: nt,
        v: Vec::with_capacity(np * nt),
        v_p: Vec::with_capacity(np * nt),
        v_c: Vec::with_capacity(np * nt),
        v_net: Vec::with_capacity(np * nt),
    };
    for [v, vp, vc, vn] in per_path {
        out.v.extend(v);
        out.v_p.extend(vp);
        out.v_c.extend(vc);
        out.v_net.extend(vn);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, AssetDoc, MarketModel};
    use crate::scalar::mean_and_stderr;
    use crate::simulation::{simulate, Measure, TimeGrid};
    use std::sync::Arc;

    fn scenario(doc: &MarketModel, steps: usize, paths: usize, seed: u64) -> ScenarioSet<f64> {
        let m = Arc::new(validate_model(doc).unwrap());
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        simulate(m, &g, paths, seed, Measure::RiskNeutral).unwrap()
    }

    fn single(r: f64) -> MarketModel {
        MarketModel::default()
            .with_currency("EUR", true)
            .with_rate("EUR", "unsecured", r)
    }

    fn two_ccy() -> MarketModel {
        MarketModel::default()
            .with_currency("EUR", true)
            .with_currency("USD", false)
            .with_rate("EUR", "unsecured", 0.02)
            .with_rate("USD", "unsecured", 0.045)
            .with_asset(AssetDoc::new("D", "EUR", 0.2, 100.0).dividend(0.01).repo(0.015))
            .with_asset(AssetDoc::new("F", "USD", 0.3, 40.0).dividend(0.02).repo(0.05))
            .with_fx("USD", 0.2, 1.1)
            .with_correlation(
                &["D", "F", "FX:USD"],
                vec![1.0, 0.2, 0.1, 0.2, 1.0, -0.4, 0.1, -0.4, 1.0],
            )
    }

    #[test]
    fn discounted_single_flow() {
        let s = scenario(&single(0.0), 4, 3, 1);
        let c = Contract::new("EUR").with_flow(1.0, -100.0);
        assert!(discounted_flows(&s, &c, 0.0).unwrap().iter().all(|&v| v == -100.0));
        let s = scenario(&single(0.05), 4, 3, 1);
        let c = Contract::new("EUR").with_flow(1.0, 1.0);
        for v in discounted_flows(&s, &c, 0.0).unwrap() {
            assert!((v - (-0.05f64).exp()).abs() < 1e-15);
        }
        // flows at or before from_t are excluded
        assert!(discounted_flows(&s, &c, 1.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreign_flow_expectation_matches_fx_forward() {
        let s = scenario(&two_ccy(), 4, 100_000, 3);
        let c = Contract::new("USD").with_flow(1.0, 1.0);
        let (mean, se) = mean_and_stderr(&discounted_flows(&s, &c, 0.0).unwrap());
        let expected = 1.1 * (-0.045f64).exp();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
    }

    #[test]
    fn off_grid_flow_is_rejected() {
        let s = scenario(&single(0.0), 4, 1, 1);
        let c = Contract::new("EUR").with_flow(0.3, 1.0);
        assert_eq!(discounted_flows(&s, &c, 0.0), Err(PathError::FlowOffGrid(0.3)));
    }

    #[test]
    fn constant_asset_has_zero_gain() {
        let doc = single(0.0).with_asset(AssetDoc::new("A", "EUR", 0.0, 10.0).repo(0.0));
        let s = scenario(&doc, 5, 2, 1);
        for j in 0..5 {
            assert_eq!(gain_increment(&s, 0, 1, j), 0.0);
        }
    }

    #[test]
    fn gain_processes_have_zero_mean() {
        let s = scenario(&two_ccy(), 8, 100_000, 5);
        let usd = CurrencyIndex(1);
        for i in 0..2 {
            let k: Vec<f64> = (0..s.n_paths())
                .map(|p| {
                    (0..8)
                        .map(|j| {
                            let fx_part = s.asset(p, i, j) * (s.fx(p, usd, j + 1) - s.fx(p, usd, j));
                            gain_increment(&s, i, p, j) - if i == 1 { fx_part } else { 0.0 }
                        })
                        .sum()
                })
                .collect();
            let (mean, se) = mean_and_stderr(&k);
            assert!(mean.abs() < 3.0 * se, "asset {i}: {mean} (se {se})");
        }
    }

    #[test]
    fn zero_strategy_grows_at_domestic_rate() {
        let s = scenario(&two_ccy(), 6, 4, 1);
        let st = ScheduleStrategy::zero(2, 2, s.n_times());
        let w = replay_wealth(&s, &st, &Contract::new("EUR"), 1.0, None).unwrap();
        for p in 0..4 {
            assert!((w.terminal(p) - 0.02f64.exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn repo_constrained_buy_and_hold_accumulates_gains() {
        let doc = single(0.03).with_asset(AssetDoc::new("A", "EUR", 0.25, 50.0).dividend(0.01).repo(0.02));
        let s = scenario(&doc, 12, 200, 2);
        let st = ScheduleStrategy::constant(&[3.0], &[0.0], &[0.0], s.n_times()).repo_constrained();
        let w = replay_wealth(&s, &st, &Contract::new("EUR"), 0.0, None).unwrap();
        let nt = s.n_times();
        for p in 0..s.n_paths() {
            let direct: f64 = (0..nt - 1)
                .map(|j| 3.0 * gain_increment(&s, 0, p, j) * s.domestic_account(nt - 1) / s.domestic_account(j + 1))
                .sum();
            let v = w.terminal(p);
            assert!((v - direct).abs() <= 1e-12 * direct.abs().max(1.0), "{v} vs {direct}");
        }
    }

    #[test]
    fn netted_wealth_removes_discounted_contract_flows() {
        let s = scenario(&two_ccy(), 10, 50, 8);
        let mut st = ScheduleStrategy::zero(2, 2, s.n_times());
        for j in 0..s.n_times() {
            st.xi[0][j] = 1.0 + j as f64 * 0.1;
            st.xi[1][j] = -2.0;
            st.psi[1][j] = 0.5;
            st.psi0[1][j] = 3.0 - j as f64 * 0.2;
        }
        let c = Contract::new("USD")
            .with_flow(0.0, 2.0)
            .with_flow(0.5, -5.0)
            .with_flow(1.0, 7.0)
            .with_initial_price(1.5);
        let w = replay_wealth(&s, &st, &c, 0.7, None).unwrap();
        let nt = s.n_times();
        let flows = c.on_grid(&s).unwrap();
        for p in 0..s.n_paths() {
            let bt = s.domestic_account(nt - 1);
            let sum: f64 = (0..nt)
                .map(|j| flows.amounts[j] * s.fx(p, flows.currency, j) / s.domestic_account(j))
                .sum();
            let lhs = w.v_net[w.at(p, nt - 1)];
            let rhs = w.terminal(p) - bt * sum;
            assert!((lhs - rhs).abs() <= 1e-12 * w.terminal(p).abs().max(1.0));
        }
    }

    #[test]
    fn replay_is_linear() {
        let s = scenario(&two_ccy(), 6, 20, 4);
        let mut st = ScheduleStrategy::zero(2, 2, s.n_times());
        st.xi[1] = vec![0.3; s.n_times()];
        st.psi[0] = vec![-1.2; s.n_times()];
        st.psi0[1] = vec![4.0; s.n_times()];
        let c = Contract::new("USD").with_flow(0.5, 3.0);
        let w1 = replay_wealth(&s, &st, &c, 1.0, None).unwrap();
        let w2 = replay_wealth(&s, &st.scaled(2.0), &c.scaled(2.0), 2.0, None).unwrap();
        assert!(w1.v.iter().zip(&w2.v).all(|(a, b)| 2.0 * a == *b));
    }

    #[test]
    fn contract_json_roundtrip() {
        let c: Contract<f64> = serde_json::from_str(r#"{"currency": "USD", "flows": [{"time": 1, "amount": -1}]}"#).unwrap();
        assert_eq!(c, Contract::new("USD").with_flow(1.0, -1.0));
        let both = c.combined(&Contract::new("USD").with_flow(0.5, 2.0).with_initial_price(0.1)).unwrap();
        assert_eq!(both.flow_times(), vec![0.5, 1.0]);
        assert_eq!(both.initial_price, Some(0.1));
        assert!(c.combined(&Contract::new("EUR")).is_none());
    }
}
