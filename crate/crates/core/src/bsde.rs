//! Backward regression solver for the value of a contract whose cash
//! collateral is rehypothecated and tracks the contract's own value:
//!
//! `V_j = E_j[V_{j+1} - dA_{j+1}] - (R_j V_j + G_j C(V_j))`,  `V_N = 0`,
//!
//! with `R_j = int r^e`, `G_j = int (r^e - r^{c,e} - q^{e,k3})` over the step
//! and `C(v) = (1+delta1)(-v)^+ - (1+delta2)(-v)^-` the collateral held in
//! domestic units. Conditional expectations come from least squares on
//! monomials of the standardized log-states; the implicit `V_j` dependence is
//! resolved by Picard iteration on each slice.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::pathfunc::{Contract, PathError};
use crate::scalar::{mean_and_stderr, pairwise_sum, Real};
use crate::simulation::{Measure, ScenarioSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BsdeError {
    #[error("Picard iteration diverged at slice {slice} (residual {residual:e})")]
    PicardDivergence { slice: usize, residual: f64 },
    #[error("regression normal equations are singular at slice {slice}")]
    SingularRegression { slice: usize },
    #[error("the BSDE requires scenarios under the domestic martingale measure")]
    ScenarioMeasureMismatch,
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeConfig {
    /// Total degree of the polynomial regression basis.
    pub degree: usize,
    pub picard_max: usize,
    /// Relative change below which a slice's Picard loop stops.
    pub picard_tol: f64,
    /// Ridge added to the scaled normal equations when they are ill-conditioned.
    pub ridge: f64,
    pub max_condition: f64,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            picard_max: 20,
            picard_tol: 1e-8,
            ridge: 1e-8,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BsdeSolution<T: Real> {
    pub v0: T,
    /// Standard error of `v0` from the pathwise realized values.
    pub std_error: T,
    pub n_paths: usize,
    pub n_times: usize,
    /// `V` at every node, `[path * n_times + j]`.
    #[serde(skip)]
    pub surface: Vec<T>,
    /// Picard iterations used on each slice `j = 0..n_times-1`.
    pub picard_iterations: Vec<usize>,
    /// Slices where the ridge fallback was applied.
    pub ridge_slices: Vec<usize>,
    pub seed: u64,
}

/// Collateral held for value `v`: `(1+delta1)(-v)^+ - (1+delta2)(-v)^-`.
pub fn collateral_of_value<T: Real>(v: T, delta1: T, delta2: T) -> T {
    let one = T::one();
    (one + delta1) * (-v).pos() - (one + delta2) * (-v).neg_part()
}

/// Driver integrated over a step: `r v + g C(v)`, where `r` and `g` are the
/// step integrals of `r^e` and `r^e - r^{c,e} - q`.
pub fn driver<T: Real>(r: T, g: T, delta1: T, delta2: T, v: T) -> T {
    r * v + g * collateral_of_value(v, delta1, delta2)
}

/// Lipschitz constant of [`driver`] in `v`.
pub fn lipschitz_bound<T: Real>(r: T, g: T, delta1: T, delta2: T) -> T {
    r.abs() + g.abs() * (T::one() + delta1.max(delta2))
}

/// Exponents of all monomials in `n` variables with total degree `<= degree`,
/// constant first.
fn monomials(n: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    let mut frontier = vec![vec![0; n]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // extend only at or after the last used variable to avoid duplicates
            let start = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for v in start..n {
                let mut e = m.clone();
                e[v] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Standardized log-state features of one slice.
struct Basis {
    /// Drivers with non-degenerate spread, with their mean and std of log level.
    vars: Vec<(usize, f64, f64)>,
    terms: Vec<Vec<usize>>,
}

impl Basis {
    fn new<T: Real>(scenario: &ScenarioSet<T>, j: usize, degree: usize) -> Self {
        let np = scenario.n_paths();
        let mut vars = Vec::new();
        for d in 0..scenario.n_drivers() {
            let logs: Vec<f64> = (0..np).map(|p| scenario.level(p, d, j).to_f64_lossy().ln()).collect();
            let (mean, se) = mean_and_stderr(&logs);
            let sd = se * (np as f64).sqrt();
            if sd.is_finite() && sd > 1e-12 * mean.abs().max(1.0) {
                vars.push((d, mean, sd));
            }
        }
        let terms = monomials(vars.len(), if vars.is_empty() { 0 } else { degree });
        Self { vars, terms }
    }

    fn len(&self) -> usize {
        self.terms.len()
    }

    fn eval<T: Real>(&self, scenario: &ScenarioSet<T>, p: usize, j: usize, z: &mut [f64], out: &mut [f64]) {
        for (k, &(d, m, s)) in self.vars.iter().enumerate() {
            z[k] = (scenario.level(p, d, j).to_f64_lossy().ln() - m) / s;
        }
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.iter().zip(z.iter()).fold(1.0, |acc, (&e, &zk)| acc * zk.powi(e as i32));
        }
    }
}

const BLOCK: usize = 2048;

/// Least-squares fit of `y` on the slice basis, returning fitted values and
/// whether the ridge fallback was used.
fn regress<T: Real>(
    scenario: &ScenarioSet<T>,
    j: usize,
    y: &[T],
    cfg: &BsdeConfig,
) -> Result<(Vec<T>, bool), BsdeError> {
    let basis = Basis::new(scenario, j, cfg.degree);
    let m = basis.len();
    let np = scenario.n_paths();
    if m == 1 {
        let mean = pairwise_sum(y) / T::from_usize_lossy(np);
        return Ok((vec![mean; np], false));
    }
    // fixed-size blocks summed in order keep the result independent of threads
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..np.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut ata = vec![0.0; m * m];
            let mut aty = vec![0.0; m];
            let mut z = vec![0.0; basis.vars.len()];
            let mut phi = vec![0.0; m];
            for (p, yp) in y.iter().enumerate().skip(b * BLOCK).take(BLOCK) {
                basis.eval(scenario, p, j, &mut z, &mut phi);
                let yp = yp.to_f64_lossy();
                for r in 0..m {
                    aty[r] += phi[r] * yp;
                    for c in r..m {
                        ata[r * m + c] += phi[r] * phi[c];
                    }
                }
            }
            (ata, aty)
        })
        .collect();
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut aty = DVector::<f64>::zeros(m);
    for (pa, pb) in &partials {
        for r in 0..m {
            aty[r] += pb[r];
            for c in r..m {
                ata[(r, c)] += pa[r * m + c];
            }
        }
    }
    let n = np as f64;
    for r in 0..m {
        aty[r] /= n;
        for c in r..m {
            ata[(r, c)] /= n;
            ata[(c, r)] = ata[(r, c)];
        }
    }
    let eig = SymmetricEigen::new(ata.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l.abs())));
    let ridge = !(lo > 0.0) || hi / lo > cfg.max_condition;
    if ridge {
        for r in 0..m {
            ata[(r, r)] += cfg.ridge;
        }
    }
    let coef = ata
        .cholesky()
        .ok_or(BsdeError::SingularRegression { slice: j })?
        .solve(&aty);
    let fitted = (0..np)
        .into_par_iter()
        .map_init(
            || (vec![0.0; basis.vars.len()], vec![0.0; m]),
            |(z, phi), p| {
                basis.eval(scenario, p, j, z, phi);
                T::lit(phi.iter().zip(coef.iter()).map(|(a, b)| a * b).sum())
            },
        )
        .collect();
    Ok((fitted, ridge))
}

/// Solves for the value surface of `contract` with endogenous cash collateral
/// in currency `k3` (rehypothecation, symmetric collateral rates).
pub fn solve_endogenous<T: Real>(
    scenario: &ScenarioSet<T>,
    contract: &Contract<T>,
    k3: &str,
    delta1: T,
    delta2: T,
    cfg: &BsdeConfig,
) -> Result<BsdeSolution<T>, BsdeError> {
    if scenario.measure() != Measure::RiskNeutral {
        return Err(BsdeError::ScenarioMeasureMismatch);
    }
    if cfg.picard_max == 0 || !(cfg.picard_tol > 0.0) {
        return Err(BsdeError::BadConfig("picard_max >= 1 and picard_tol > 0 required".into()));
    }
    if !(delta1 > -T::one()) || !(delta2 > -T::one()) {
        return Err(BsdeError::BadConfig("haircuts must exceed -1".into()));
    }
    let model = scenario.model();
    let e = model.domestic();
    let k3 = model.currency(k3)?;
    let rc_e = model.symmetric_collateral_rate(e)?;
    model.symmetric_collateral_rate(k3)?;
    let basis = model.basis_curve(e, k3)?;
    let flows = contract.on_grid(scenario)?;
    let t = scenario.grid().times();
    let (np, nt) = (scenario.n_paths(), scenario.n_times());
    let tol = T::lit(cfg.picard_tol);

    let mut v_next = vec![T::zero(); np];
    let mut u = vec![T::zero(); np];
    let mut surface = vec![T::zero(); np * nt];
    let mut iterations = vec![0; nt - 1];
    let mut ridge_slices = Vec::new();

    for j in (0..nt - 1).rev() {
        let r = model.unsecured(e).integral(t[j], t[j + 1]);
        let g = r - rc_e.integral(t[j], t[j + 1]) - basis.integral(t[j], t[j + 1]);
        let flow = |p: usize| flows.amounts[j + 1] * scenario.fx(p, flows.currency, j + 1);
        let y: Vec<T> = (0..np).map(|p| v_next[p] - flow(p)).collect();
        let (fitted, ridged) = regress(scenario, j, &y, cfg)?;
        if ridged {
            ridge_slices.push(j);
        }

        let solved: Vec<(T, usize, T, T)> = fitted
            .par_iter()
            .map(|&yhat| {
                let mut v = yhat;
                let mut first = T::zero();
                let mut last = T::zero();
                for it in 1..=cfg.picard_max {
                    let next = yhat - driver(r, g, delta1, delta2, v);
                    let diff = (next - v).abs();
                    v = next;
                    if it == 1 {
                        first = diff;
                    }
                    last = diff;
                    if diff == T::zero() || diff <= tol * v.abs() {
                        return (v, it, first, last);
                    }
                }
                (v, cfg.picard_max + 1, first, last)
            })
            .collect();

        let mut used = 0;
        for (p, &(v, it, first, last)) in solved.iter().enumerate() {
            if it > cfg.picard_max {
                if last > first {
                    return Err(BsdeError::PicardDivergence {
                        slice: j,
                        residual: last.to_f64_lossy(),
                    });
                }
                log::warn!("slice {j}: Picard cap reached on path {p} with residual {last}");
            }
            used = used.max(it.min(cfg.picard_max));
            surface[p * nt + j] = v;
            u[p] = u[p] - flow(p) - driver(r, g, delta1, delta2, v);
            v_next[p] = v;
        }
        iterations[j] = used;
    }

    let (_, std_error) = mean_and_stderr(&u);
    let v0 = pairwise_sum(&v_next) / T::from_usize_lossy(np);
    Ok(BsdeSolution {
        v0,
        std_error,
        n_paths: np,
        n_times: nt,
        surface,
        picard_iterations: iterations,
        ridge_slices,
        seed: scenario.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, AssetDoc, MarketModel};
    use crate::pricing::price_fully_collateralized;
    use crate::simulation::{simulate, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn doc() -> MarketModel {
        MarketModel::default()
            .with_currency("EUR", true)
            .with_currency("USD", false)
            .with_rate("EUR", "unsecured", 0.03)
            .with_rate("EUR", "collateral_lend", 0.01)
            .with_rate("USD", "unsecured", 0.045)
            .with_rate("USD", "collateral_lend", 0.032)
            .with_asset(AssetDoc::new("S", "EUR", 0.2, 100.0))
            .with_fx("USD", 0.1, 1.1)
    }

    fn scenario(steps: usize, paths: usize, seed: u64) -> ScenarioSet<f64> {
        let m = Arc::new(validate_model(&doc()).unwrap());
        simulate(m, &TimeGrid::uniform(1.0, steps).unwrap(), paths, seed, Measure::RiskNeutral).unwrap()
    }

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(0, 2).len(), 1);
        assert_eq!(monomials(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn zero_contract_has_zero_value() {
        let s = scenario(5, 100, 1);
        let sol = solve_endogenous(&s, &Contract::new("EUR"), "USD", 0.1, 0.2, &BsdeConfig::default()).unwrap();
        assert!(sol.surface.iter().all(|&v| v == 0.0));
        assert_eq!(sol.v0, 0.0);
    }

    #[test]
    fn unhaircut_value_matches_closed_form() {
        let s = scenario(50, 20_000, 2);
        let m = s.model();
        for (k2, k3) in [("EUR", "EUR"), ("EUR", "USD"), ("USD", "EUR")] {
            let c = Contract::new(k2).with_flow(1.0, -1.0);
            let sol = solve_endogenous(&s, &c, k3, 0.0, 0.0, &BsdeConfig::default()).unwrap();
            let exact = price_fully_collateralized(m, &c, k3).unwrap();
            let band = 3.0 * sol.std_error + 1e-5;
            assert!((sol.v0 - exact).abs() < band, "{k2}/{k3}: {} vs {exact}", sol.v0);
        }
    }

    #[test]
    fn haircut_on_received_collateral_does_not_raise_value() {
        // hedger receives 1 at maturity, so V < 0 and the hedger posts collateral;
        // with r^e above the collateral rate, over-posting is a cost
        let s = scenario(20, 5000, 3);
        let c = Contract::new("EUR").with_flow(1.0, 1.0);
        let v = |d1| solve_endogenous(&s, &c, "EUR", d1, 0.0, &BsdeConfig::default()).unwrap().v0;
        let (a, b) = (v(0.0), v(0.5));
        assert!(a < 0.0);
        assert!(b <= a, "{b} > {a}");
    }

    #[test]
    fn driver_is_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (r, g) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let (d1, d2) = (rng.random_range(-0.5..1.0), rng.random_range(-0.5..1.0));
            let (v, w): (f64, f64) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let lhs = (driver(r, g, d1, d2, v) - driver(r, g, d1, d2, w)).abs();
            assert!(lhs <= lipschitz_bound(r, g, d1, d2) * (v - w).abs() + 1e-15);
        }
        assert_eq!(collateral_of_value(0.0f64, 0.3, 0.4), 0.0);
        assert!((collateral_of_value(-2.0f64, 0.1, 0.0) - 2.2).abs() < 1e-15);
        assert!((collateral_of_value(3.0f64, 0.0, 0.2) + 3.6).abs() < 1e-15);
    }

    #[test]
    fn refining_the_grid_stays_within_error() {
        let c = Contract::new("USD").with_flow(1.0, -1.0);
        let cfg = BsdeConfig::default();
        let a = solve_endogenous(&scenario(10, 20_000, 4), &c, "EUR", 0.1, 0.1, &cfg).unwrap();
        let b = solve_endogenous(&scenario(20, 20_000, 5), &c, "EUR", 0.1, 0.1, &cfg).unwrap();
        let band = 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.v0 - b.v0).abs() < band, "{} vs {}", a.v0, b.v0);
    }

    #[test]
    fn deterministic_states_use_ridge_or_constant_basis() {
        let d = MarketModel::default()
            .with_currency("EUR", true)
            .with_rate("EUR", "unsecured", 0.03)
            .with_rate("EUR", "collateral_lend", 0.01)
            .with_asset(AssetDoc::new("S", "EUR", 0.0, 100.0));
        let m = Arc::new(validate_model(&d).unwrap());
        let s = simulate(m, &TimeGrid::uniform(1.0, 4).unwrap(), 50, 1, Measure::RiskNeutral).unwrap();
        let c = Contract::new("EUR").with_flow(1.0, -1.0);
        let sol = solve_endogenous(&s, &c, "EUR", 0.0, 0.0, &BsdeConfig::default()).unwrap();
        let expected = (0..4).fold(1.0f64, |acc, _| acc / (1.0 + 0.01 * 0.25));
        assert!((sol.v0 - expected).abs() < 1e-12);
        assert!(sol.picard_iterations.iter().all(|&n| (1..=20).contains(&n)));
    }

    #[test]
    fn physical_scenarios_are_rejected() {
        let m = Arc::new(validate_model(&doc()).unwrap());
        let s = simulate(m, &TimeGrid::uniform(1.0, 2).unwrap(), 10, 1, Measure::Physical).unwrap();
        assert_eq!(
            solve_endogenous(&s, &Contract::new("EUR"), "EUR", 0.0, 0.0, &BsdeConfig::default()),
            Err(BsdeError::ScenarioMeasureMismatch)
        );
    }
}
