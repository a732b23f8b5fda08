//! Multi-currency collateralized pricing and simulation engine.
//!
//! The numerical core is generic over the scalar type ([`scalar::Real`], `f32`
//! or `f64`); the aliases at the crate root fix it to `f64`.
//!
//! ```
//! use xccy_core::model::{validate_model, MarketModel};
//! use xccy_core::pathfunc::Contract;
//! use xccy_core::pricing::price_fully_collateralized;
//!
//! let doc = MarketModel::default()
//!     .with_currency("EUR", true)
//!     .with_rate("EUR", "unsecured", 0.02)
//!     .with_rate("EUR", "collateral_lend", 0.01);
//! let model: xccy_core::Model = validate_model(&doc).unwrap();
//! let pay_one = Contract::new("EUR").with_flow(1.0, -1.0);
//! let price = price_fully_collateralized(&model, &pay_one, "EUR").unwrap();
//! assert!((price - (-0.01f64).exp()).abs() < 1e-15);
//! ```

// `!(x > 0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod collateral;
pub mod diagnostics;
pub mod model;
pub mod pathfunc;
pub mod pricing;
pub mod scalar;
pub mod simulation;

pub use scalar::Real;

pub type Model = model::ValidatedModel<f64>;
pub type Curve = model::RateCurve<f64>;
pub type Grid = simulation::TimeGrid<f64>;
pub type Scenarios = simulation::ScenarioSet<f64>;
pub type Contract = pathfunc::Contract<f64>;
pub type CollateralPath = collateral::CollateralPath<f64>;
pub type PriceReport = pricing::PriceReport<f64>;
pub type BsdeSolution = bsde::BsdeSolution<f64>;
pub type WealthPath = pathfunc::WealthPath<f64>;
