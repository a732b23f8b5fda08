//! Time-zero prices of collateralized contracts.
//!
//! A positive price means the hedger receives that amount at inception. The
//! Monte Carlo price is minus the expected discounted total stream: contract
//! flows after inception plus the convention's collateral stream, whose FX
//! exposure enters through its drift `r^e - r^{k3}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collateral::{adjustment_increments, exogenous_path, CollError, CollateralMode, CollateralPath, CollateralSpec, FxTerm};
use crate::model::{ModelError, ValidatedModel};
use crate::pathfunc::{discounted_flows, Contract, PathError};
use crate::scalar::{mean_and_stderr, pairwise_sum, Real};
use crate::simulation::{Measure, ScenarioSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PriceError {
    #[error("endogenous collateral must be priced with the BSDE solver")]
    EndogenousSpecPassed,
    #[error("pricing requires scenarios under the domestic martingale measure")]
    ScenarioMeasureMismatch,
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Collateral(#[from] CollError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Legs<T: Real> {
    /// Minus the expected discounted contract flows after inception.
    pub contractual: T,
    /// Minus the expected discounted collateral stream.
    pub collateral: T,
    /// Part of the collateral leg due to the collateral currency's FX drift.
    pub fx_correction: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PriceReport<T: Real> {
    /// `legs.contractual + legs.collateral`.
    pub price: T,
    pub std_error: T,
    pub legs: Legs<T>,
    pub n_paths: usize,
    pub seed: u64,
    pub convention: String,
    pub contract_currency: String,
    pub collateral_currency: String,
    pub control_variate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PriceOptions {
    /// Replace the contractual leg by its closed-form expectation. The
    /// standard error then only reflects the collateral leg.
    pub control_variate: bool,
}

/// `-sum_{t_j > 0} a_j X^{e,k2}_0 / B^{k2}_{t_j}`: exact expectation of the contractual leg.
pub fn contractual_leg_closed_form<T: Real>(model: &ValidatedModel<T>, contract: &Contract<T>) -> Result<T, ModelError> {
    let k2 = model.currency(&contract.currency)?;
    let x0 = model.fx_initial(k2);
    let mut total = T::zero();
    for f in contract.flows.iter().filter(|f| f.time > T::zero()) {
        total = total - f.amount * x0 / model.unsecured_account(k2, f.time)?;
    }
    Ok(total)
}

/// Monte Carlo price with a given exogenous collateral path.
pub fn price_exogenous<T: Real>(
    scenario: &ScenarioSet<T>,
    contract: &Contract<T>,
    coll: &CollateralPath<T>,
    spec: &CollateralSpec,
    opts: PriceOptions,
) -> Result<PriceReport<T>, PriceError> {
    if matches!(spec.mode, CollateralMode::Endogenous) {
        return Err(PriceError::EndogenousSpecPassed);
    }
    price_path(scenario, contract, coll, spec, opts)
}

/// Builds the exogenous collateral path named in `spec` and prices with it.
pub fn price_with_spec<T: Real>(
    scenario: &ScenarioSet<T>,
    contract: &Contract<T>,
    spec: &CollateralSpec,
    opts: PriceOptions,
) -> Result<PriceReport<T>, PriceError> {
    if matches!(spec.mode, CollateralMode::Endogenous) {
        return Err(PriceError::EndogenousSpecPassed);
    }
    check_measure(scenario)?;
    let coll = exogenous_path(scenario, contract, spec)?;
    price_path(scenario, contract, &coll, spec, opts)
}

fn check_measure<T: Real>(scenario: &ScenarioSet<T>) -> Result<(), PriceError> {
    if scenario.measure() != Measure::RiskNeutral {
        return Err(PriceError::ScenarioMeasureMismatch);
    }
    Ok(())
}

fn price_path<T: Real>(
    scenario: &ScenarioSet<T>,
    contract: &Contract<T>,
    coll: &CollateralPath<T>,
    spec: &CollateralSpec,
    opts: PriceOptions,
) -> Result<PriceReport<T>, PriceError> {
    check_measure(scenario)?;
    let resolved = spec.check(scenario.model())?;
    let flows = discounted_flows(scenario, contract, T::zero())?;
    let inc = adjustment_increments(scenario, coll, &resolved, FxTerm::Drift).map_err(PathError::from)?;
    let ns = scenario.n_times() - 1;
    let discount: Vec<T> = (0..ns).map(|j| scenario.domestic_account(j).recip()).collect();

    let legs: Vec<(T, T, T)> = (0..scenario.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut coll_leg = T::zero();
            let mut fx_leg = T::zero();
            for (j, &d) in discount.iter().enumerate() {
                coll_leg = coll_leg - inc.total(p, j) * d;
                fx_leg = fx_leg - inc.fx_at(p, j) * d;
            }
            (-flows[p], coll_leg, fx_leg)
        })
        .collect();

    let n = T::from_usize_lossy(legs.len());
    let contract_samples: Vec<T> = legs.iter().map(|l| l.0).collect();
    let coll_samples: Vec<T> = legs.iter().map(|l| l.1).collect();
    let fx_samples: Vec<T> = legs.iter().map(|l| l.2).collect();
    let collateral = pairwise_sum(&coll_samples) / n;
    let fx_correction = pairwise_sum(&fx_samples) / n;
    let (contractual, std_error) = if opts.control_variate {
        let exact = contractual_leg_closed_form(scenario.model(), contract)?;
        (exact, mean_and_stderr(&coll_samples).1)
    } else {
        let totals: Vec<T> = legs.iter().map(|l| l.0 + l.1).collect();
        (pairwise_sum(&contract_samples) / n, mean_and_stderr(&totals).1)
    };
    let model = scenario.model();
    Ok(PriceReport {
        price: contractual + collateral,
        std_error,
        legs: Legs {
            contractual,
            collateral,
            fx_correction,
        },
        n_paths: scenario.n_paths(),
        seed: scenario.seed(),
        convention: resolved.kind.as_str().to_string(),
        contract_currency: contract.currency.clone(),
        collateral_currency: model.currency_code(resolved.k3).to_string(),
        control_variate: opts.control_variate,
    })
}

/// Closed-form price under perfect collateralization in currency `k3`:
/// `-sum_j a_j exp(-int (r^{c,e} + q^{e,k3})) X^{e,k2}_0 exp(int (r^e - r^{k2}))`.
pub fn price_fully_collateralized<T: Real>(model: &ValidatedModel<T>, contract: &Contract<T>, k3: &str) -> Result<T, PriceError> {
    let e = model.domestic();
    let k3 = model.currency(k3)?;
    let k2 = model.currency(&contract.currency)?;
    let rc_e = model.symmetric_collateral_rate(e)?;
    model.symmetric_collateral_rate(k3)?;
    let basis = model.basis_curve(e, k3)?;
    let x0 = model.fx_initial(k2);
    let mut total = T::zero();
    for f in contract.flows.iter().filter(|f| f.time > T::zero()) {
        let disc = (-(rc_e.integral(T::zero(), f.time) + basis.integral(T::zero(), f.time))).exp();
        let fwd = if k2 == e {
            T::one()
        } else {
            x0 * (model.unsecured(e).integral(T::zero(), f.time) - model.unsecured(k2).integral(T::zero(), f.time)).exp()
        };
        total = total - f.amount * disc * fwd;
    }
    Ok(total)
}
