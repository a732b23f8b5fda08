use std::fs;
use std::path::{Path, PathBuf};

use xccy_cli::{run, ResultRow};

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name).display().to_string()
}

fn xccy(args: &[&str]) -> i32 {
    run(std::iter::once("xccy").chain(args.iter().copied()))
}

fn out_dir(tmp: &tempfile::TempDir) -> String {
    tmp.path().join("out").display().to_string()
}

fn rows(dir: &str) -> Vec<ResultRow> {
    let mut r = csv::Reader::from_path(PathBuf::from(dir).join("results.csv")).unwrap();
    r.deserialize().map(|x| x.unwrap()).collect()
}

#[test]
fn validate_reports_ok_and_violations() {
    assert_eq!(xccy(&["validate", "--model", &data("three_ccy.json")]), 0);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"currencies": [{"code": "EUR"}, {"code": "USD"}]}"#).unwrap();
    assert_eq!(xccy(&["validate", "--model", bad.to_str().unwrap()]), 1);
}

#[test]
fn io_and_argument_errors_exit_3() {
    assert_eq!(xccy(&["validate", "--model", "/definitely/not/here.json"]), 3);
    assert_eq!(xccy(&["price", "--bogus"]), 3);
    assert_eq!(xccy(&["frobnicate"]), 3);
    let tmp = tempfile::tempdir().unwrap();
    let garbled = tmp.path().join("m.json");
    fs::write(&garbled, "{ not json").unwrap();
    assert_eq!(xccy(&["validate", "--model", garbled.to_str().unwrap()]), 3);
}

#[test]
fn price_appends_rows_and_overwrites_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp);
    let (model, trade) = (data("three_ccy.json"), data("usd_trade.json"));
    let common = ["--model", &model, "--trade", &trade, "--paths", "4000", "--steps", "8", "--out", &out];
    assert_eq!(xccy(&[&["price"][..], &common].concat()), 0);
    assert_eq!(xccy(&[&["price", "--control-variate"][..], &common].concat()), 0);
    assert_eq!(xccy(&["price", "--mode", "full-collateral", "--model", &model, "--trade", &trade, "--out", &out]), 0);

    let r = rows(&out);
    assert_eq!(r.len(), 3);
    let text = fs::read_to_string(PathBuf::from(&out).join("results.csv")).unwrap();
    assert_eq!(text.matches("trade_id,convention").count(), 1);
    assert!(r.iter().all(|x| x.trade_id == "USD-ZC-2Y" && x.k2 == "USD" && x.k3 == "EUR"));
    assert_eq!(r[0].convention, "cash-rehypothecation");
    assert_eq!((r[0].n_paths, r[0].seed), (4000, 1));
    // the control variate only removes noise from the contractual leg
    assert!(r[1].se < r[0].se);
    assert!((r[0].price - r[1].price).abs() < 4.0 * r[0].se);
    assert_eq!((r[2].convention.as_str(), r[2].se), ("full-collateral", 0.0));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(PathBuf::from(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "full-collateral");
}

#[test]
fn endogenous_trade_needs_the_bsde_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp);
    let (model, trade) = (data("three_ccy.json"), data("usd_endogenous.json"));
    let args = ["price", "--model", &model, "--trade", &trade, "--paths", "100", "--steps", "4", "--out", &out];
    assert_eq!(xccy(&args), 1);

    let args = [
        "bsde", "--model", &model, "--trade", &trade, "--paths", "4000", "--steps", "10", "--out", &out, "--surface",
        "2",
    ];
    assert_eq!(xccy(&args), 0);
    let r = rows(&out);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].convention, "endogenous-cash-rehypothecation");
    let surface = fs::read_to_string(PathBuf::from(&out).join("surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 2 * 11);
}

#[test]
fn unsupported_bsde_convention_is_a_spec_error() {
    let tmp = tempfile::tempdir().unwrap();
    let trade = tmp.path().join("t.json");
    fs::write(
        &trade,
        r#"{"trade_id": "x", "contract": {"currency": "EUR", "flows": [{"time": 1.0, "amount": -1.0}]},
            "collateral": {"currency": "EUR", "form": "cash", "convention": "segregation", "mode": "endogenous"}}"#,
    )
    .unwrap();
    let out = out_dir(&tmp);
    let args = ["bsde", "--model", &data("three_ccy.json"), "--trade", trade.to_str().unwrap(), "--paths", "50", "--out", &out];
    assert_eq!(xccy(&args), 1);
}

#[test]
fn simulate_dumps_requested_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(&tmp);
    let args = [
        "simulate", "--model", &data("three_ccy.json"), "--paths", "50", "--steps", "4", "--dump-paths", "2", "--out", &out,
    ];
    assert_eq!(xccy(&args), 0);
    let text = fs::read_to_string(PathBuf::from(&out).join("paths.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "path,time,SX5E,DAX,SPX,NKY,FX:USD,FX:JPY");
    assert_eq!(lines.count(), 2 * 5);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(PathBuf::from(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["terminal"].as_array().unwrap().len(), 6);
}

#[test]
fn failing_check_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(data("three_ccy.json")).unwrap()).unwrap();
    // a physical drift far from the risk-neutral one
    doc["fx"][0]["p_drift"] = serde_json::json!(0.2);
    let model = tmp.path().join("drifted.json");
    fs::write(&model, doc.to_string()).unwrap();
    let out = out_dir(&tmp);
    let base = ["check", "--model", model.to_str().unwrap(), "--paths", "20000", "--steps", "4", "--out", &out];
    assert_eq!(xccy(&base), 0);
    assert_eq!(xccy(&[&base[..], &["--measure", "physical"]].concat()), 2);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(PathBuf::from(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn single_currency_check_runs_the_reduction_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("eur.json");
    fs::write(
        &model,
        r#"{"currencies": [{"code": "EUR", "domestic": true}],
            "rates": {"EUR": {"unsecured": 0.03}},
            "assets": [{"id": "S", "currency": "EUR", "sigma": 0.2, "s0": 10.0}]}"#,
    )
    .unwrap();
    let out = out_dir(&tmp);
    assert_eq!(xccy(&["check", "--model", model.to_str().unwrap(), "--paths", "5000", "--steps", "6", "--out", &out]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(PathBuf::from(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["reduction"]["checks"].as_array().unwrap().len(), 6);
}
