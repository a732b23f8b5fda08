//! `xccy` command-line front end. [`run`] takes the argument vector and
//! returns the process exit code, so the whole CLI is testable in-process.
//!
//! Exit codes: 0 success, 1 invalid model or trade, 2 numerical failure or
//! failed check, 3 I/O or parse error.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use xccy_core::bsde::{solve_endogenous, BsdeConfig, BsdeError};
use xccy_core::collateral::{CollateralMode, CollateralSpec, ConventionKind, Convention};
use xccy_core::diagnostics::{martingale_suite, reduction_suite, MartingaleConfig, ReductionConfig};
use xccy_core::model::{validate_model, MarketModel};
use xccy_core::pricing::{price_fully_collateralized, price_with_spec, PriceOptions};
use xccy_core::simulation::{simulate, Measure, TimeGrid};
use xccy_core::{Contract, Model, Scenarios};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "xccy", version, about = "Multi-currency collateralized pricing and simulation")]
struct Cli {
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a market model.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Simulate paths and summarize terminal levels.
    Simulate(SimulateArgs),
    /// Price a trade with exogenous collateral or in closed form.
    Price(PriceArgs),
    /// Value a trade with endogenous cash collateral.
    Bsde(BsdeArgs),
    /// Run the martingale tests (and the single-currency suite when applicable).
    Check(CheckArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Simulation horizon in years; extended to the last trade flow.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = MeasureArg::RiskNeutral)]
    measure: MeasureArg,
    /// Write the first N paths to paths.csv.
    #[arg(long)]
    dump_paths: Option<usize>,
}

#[derive(Args, Debug)]
struct PriceArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    trade: PathBuf,
    #[arg(long, value_enum, default_value_t = PriceMode::Exogenous)]
    mode: PriceMode,
    /// Use the closed-form contractual leg as a control variate.
    #[arg(long)]
    control_variate: bool,
}

#[derive(Args, Debug)]
struct BsdeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    trade: PathBuf,
    /// Haircut on collateral received; defaults to the trade's value.
    #[arg(long, allow_hyphen_values = true)]
    delta1: Option<f64>,
    /// Haircut on collateral posted; defaults to the trade's value.
    #[arg(long, allow_hyphen_values = true)]
    delta2: Option<f64>,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    /// Write the value surface of the first N paths to surface.csv.
    #[arg(long)]
    surface: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = MeasureArg::RiskNeutral)]
    measure: MeasureArg,
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MeasureArg {
    RiskNeutral,
    Physical,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::RiskNeutral => Measure::RiskNeutral,
            MeasureArg::Physical => Measure::Physical,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PriceMode {
    Exogenous,
    FullCollateral,
}

/// Trade document: a contract plus an optional collateral agreement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trade {
    pub trade_id: String,
    pub contract: Contract,
    #[serde(default)]
    pub collateral: Option<CollateralSpec>,
}

impl Trade {
    fn collateral_or_none(&self) -> CollateralSpec {
        self.collateral.clone().unwrap_or_else(|| {
            CollateralSpec::cash(&self.contract.currency, Convention::Rehypothecation)
                .exogenous("constant", json!({"amount": 0.0}))
        })
    }
}

/// Row appended to `results.csv`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub trade_id: String,
    pub convention: String,
    pub k2: String,
    pub k3: String,
    pub price: f64,
    pub se: f64,
    pub n_paths: usize,
    pub seed: u64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Arc<Model>, CliError> {
    let doc: MarketModel = read_json(path)?;
    match validate_model(&doc) {
        Ok(m) => Ok(Arc::new(m)),
        Err(e) => {
            let lines: Vec<String> = e.violations.iter().map(|v| format!("  {v}")).collect();
            Err(CliError::Invalid(format!("invalid model:\n{}", lines.join("\n"))))
        }
    }
}

fn scenarios(model: Arc<Model>, run: &RunArgs, dates: &[f64], measure: Measure) -> Result<Scenarios, CliError> {
    let horizon = dates.iter().copied().fold(run.horizon, f64::max);
    let grid = TimeGrid::with_dates(horizon, run.steps, dates).map_err(invalid)?;
    simulate(model, &grid, run.paths, run.seed, measure).map_err(invalid)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(format!("{}: {e}", dir.display())))
}

fn write_report(dir: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(value).map_err(io)?;
    fs::write(&path, text + "\n").map_err(|e| io(format!("{}: {e}", path.display())))
}

fn append_result(dir: &Path, row: &ResultRow) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let path = dir.join("results.csv");
    let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(io)?;
    w.flush().map_err(io)
}

fn cmd_validate(model: &Path) -> Result<(), CliError> {
    let m = load_model(model)?;
    println!(
        "OK: {} currencies (domestic {}), {} assets, {} drivers",
        m.n_currencies(),
        m.currency_code(m.domestic()),
        m.assets().len(),
        m.n_drivers()
    );
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let model = load_model(&a.run.model)?;
    let s = scenarios(model, &a.run, &[], a.measure.into())?;
    let last = s.n_times() - 1;
    let terminal: Vec<serde_json::Value> = s
        .labels()
        .iter()
        .enumerate()
        .map(|(d, label)| {
            let xs: Vec<f64> = (0..s.n_paths()).map(|p| s.level(p, d, last)).collect();
            let (mean, se) = xccy_core::scalar::mean_and_stderr(&xs);
            json!({"driver": label, "mean": mean, "std_error": se})
        })
        .collect();
    if let Some(n) = a.dump_paths {
        ensure_dir(&a.run.out)?;
        let path = a.run.out.join("paths.csv");
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        let mut header = vec!["path".to_string(), "time".to_string()];
        header.extend(s.labels().iter().cloned());
        w.write_record(&header).map_err(io)?;
        for p in 0..n.min(s.n_paths()) {
            for (j, t) in s.grid().times().iter().enumerate() {
                let mut rec = vec![p.to_string(), t.to_string()];
                rec.extend((0..s.n_drivers()).map(|d| s.level(p, d, j).to_string()));
                w.write_record(&rec).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    write_report(
        &a.run.out,
        &json!({
            "command": "simulate",
            "n_paths": s.n_paths(),
            "n_times": s.n_times(),
            "seed": s.seed(),
            "measure": s.measure(),
            "terminal": terminal,
        }),
    )?;
    println!("simulated {} paths x {} nodes", s.n_paths(), s.n_times());
    Ok(())
}

fn cmd_price(a: &PriceArgs) -> Result<(), CliError> {
    let model = load_model(&a.run.model)?;
    let trade: Trade = read_json(&a.trade)?;
    let spec = trade.collateral_or_none();
    let k2 = trade.contract.currency.clone();
    let k3 = spec.currency.clone();
    let (row, report) = match a.mode {
        PriceMode::FullCollateral => {
            let price = price_fully_collateralized(&model, &trade.contract, &k3).map_err(invalid)?;
            let row = ResultRow {
                trade_id: trade.trade_id.clone(),
                convention: "full-collateral".into(),
                k2: k2.clone(),
                k3: k3.clone(),
                price,
                se: 0.0,
                n_paths: 0,
                seed: a.run.seed,
            };
            let report = json!({"command": "price", "mode": "full-collateral", "trade_id": trade.trade_id, "price": price, "k2": k2, "k3": k3});
            (row, report)
        }
        PriceMode::Exogenous => {
            if matches!(spec.mode, CollateralMode::Endogenous) {
                return Err(invalid("trade has endogenous collateral; use the bsde command or --mode full-collateral"));
            }
            let s = scenarios(model, &a.run, &trade.contract.flow_times(), Measure::RiskNeutral)?;
            let opts = PriceOptions {
                control_variate: a.control_variate,
            };
            let r = price_with_spec(&s, &trade.contract, &spec, opts).map_err(invalid)?;
            if !r.price.is_finite() {
                return Err(CliError::Numerical("non-finite price".into()));
            }
            let row = ResultRow {
                trade_id: trade.trade_id.clone(),
                convention: r.convention.clone(),
                k2,
                k3,
                price: r.price,
                se: r.std_error,
                n_paths: r.n_paths,
                seed: r.seed,
            };
            let report = json!({"command": "price", "mode": "exogenous", "trade_id": trade.trade_id, "report": r});
            (row, report)
        }
    };
    append_result(&a.run.out, &row)?;
    write_report(&a.run.out, &report)?;
    println!("{} {} price {} se {}", row.trade_id, row.convention, row.price, row.se);
    Ok(())
}

fn cmd_bsde(a: &BsdeArgs) -> Result<(), CliError> {
    let model = load_model(&a.run.model)?;
    let trade: Trade = read_json(&a.trade)?;
    let spec = trade.collateral.clone().unwrap_or_else(|| {
        CollateralSpec::cash(&trade.contract.currency, Convention::Rehypothecation)
    });
    if spec.kind() != ConventionKind::CashRehypothecation {
        return Err(invalid("the BSDE solver supports cash collateral under rehypothecation only"));
    }
    let d1 = a.delta1.unwrap_or(spec.delta1);
    let d2 = a.delta2.unwrap_or(spec.delta2);
    let s = scenarios(model, &a.run, &trade.contract.flow_times(), Measure::RiskNeutral)?;
    let cfg = BsdeConfig {
        degree: a.degree,
        ..BsdeConfig::default()
    };
    let sol = solve_endogenous(&s, &trade.contract, &spec.currency, d1, d2, &cfg).map_err(|e| match e {
        BsdeError::PicardDivergence { .. } | BsdeError::SingularRegression { .. } => CliError::Numerical(e.to_string()),
        other => invalid(other),
    })?;
    if let Some(n) = a.surface {
        ensure_dir(&a.run.out)?;
        let mut w = csv::Writer::from_path(a.run.out.join("surface.csv")).map_err(io)?;
        w.write_record(["path", "time", "value"]).map_err(io)?;
        for p in 0..n.min(sol.n_paths) {
            for (j, t) in s.grid().times().iter().enumerate() {
                w.write_record([p.to_string(), t.to_string(), sol.surface[p * sol.n_times + j].to_string()])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    let row = ResultRow {
        trade_id: trade.trade_id.clone(),
        convention: "endogenous-cash-rehypothecation".into(),
        k2: trade.contract.currency.clone(),
        k3: spec.currency.clone(),
        price: sol.v0,
        se: sol.std_error,
        n_paths: sol.n_paths,
        seed: sol.seed,
    };
    append_result(&a.run.out, &row)?;
    write_report(
        &a.run.out,
        &json!({"command": "bsde", "trade_id": trade.trade_id, "delta1": d1, "delta2": d2, "solution": sol}),
    )?;
    println!("{} V0 {} se {}", row.trade_id, sol.v0, sol.std_error);
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    let model = load_model(&a.run.model)?;
    let s = scenarios(model.clone(), &a.run, &[], a.measure.into())?;
    let cfg = MartingaleConfig {
        checkpoints: Vec::new(),
        threshold: a.threshold,
    };
    let tests = martingale_suite(&s, &cfg).map_err(invalid)?;
    let mut pass = tests.iter().all(|t| t.pass);
    for t in &tests {
        println!(
            "{} {} max|z| {:.3}",
            if t.pass { "PASS" } else { "FAIL" },
            t.process_id,
            t.max_abs_z()
        );
    }
    let reduction = if model.n_currencies() == 1 {
        let r = reduction_suite(
            &model,
            &ReductionConfig {
                n_paths: a.run.paths.min(2000),
                steps: a.run.steps,
                horizon: a.run.horizon,
                seed: a.run.seed,
            },
        )
        .map_err(invalid)?;
        for c in &r.checks {
            println!("{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        pass &= r.pass;
        Some(r)
    } else {
        None
    };
    write_report(
        &a.run.out,
        &json!({"command": "check", "pass": pass, "martingale": tests, "reduction": reduction}),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Numerical("one or more checks failed".into()))
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate { model } => cmd_validate(model),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Price(a) => cmd_price(a),
        Command::Bsde(a) => cmd_bsde(a),
        Command::Check(a) => cmd_check(a),
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
