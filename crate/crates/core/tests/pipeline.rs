mod common;

use std::fs;
use std::process::Command;

use chrono::NaiveDate;
use wvar::pipeline::{
    execute, run_pipeline, EmitFlags, RunConfig, Stage, FIGURE_FILE, REPORT_FILE, SEGMENTS_FILE,
};
use wvar::risk::RiskReport;
use wvar::segmentation::Segmentation;
use wvar::series::{load_prices, CsvSchema, PriceSeries};
use wvar::svg::render_svg;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wvar"))
}

fn quick_config(input: &std::path::Path) -> RunConfig {
    RunConfig {
        input: input.to_path_buf(),
        k2: 2,
        k1: 1,
        restarts: 3,
        ..RunConfig::default()
    }
}

#[test]
fn planted_regimes_give_one_breakpoint_and_ordered_risk() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prices.csv");
    common::write_planted_prices(&input, 200, 11);
    let out = dir.path().join("out");
    let cfg = RunConfig {
        out_dir: Some(out.clone()),
        ..quick_config(&input)
    };
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.segmentation.breakpoint_count, 1);
    assert!(report.segmentation.breakpoints[0].abs_diff(200) <= 5);
    let r = &report.risk;
    assert!(r.bvar < r.var && r.var < r.wvar, "{r:?}");
    for file in [REPORT_FILE, SEGMENTS_FILE, FIGURE_FILE] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let segments = fs::read_to_string(out.join(SEGMENTS_FILE)).unwrap();
    let lines: Vec<&str> = segments.lines().collect();
    assert_eq!(
        lines[0],
        "segment,start_index,end_index,start_date,end_date,length"
    );
    assert_eq!(lines.len(), 3);
}

#[test]
fn emit_flags_limit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prices.csv");
    common::write_planted_prices(&input, 60, 3);
    let out = dir.path().join("out");
    let cfg = RunConfig {
        out_dir: Some(out.clone()),
        emit: EmitFlags::parse("json").unwrap(),
        ..quick_config(&input)
    };
    run_pipeline(&cfg).unwrap();
    assert!(out.join(REPORT_FILE).exists());
    assert!(!out.join(SEGMENTS_FILE).exists());
    assert!(!out.join(FIGURE_FILE).exists());
}

#[test]
fn constant_prices_fail_in_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.csv");
    let mut text = String::from("date,close\n");
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    for k in 0..50 {
        text.push_str(&format!("{},100.0\n", start + chrono::Days::new(k)));
    }
    fs::write(&input, text).unwrap();
    let err = execute(&quick_config(&input)).unwrap_err();
    assert_eq!(err.stage, Stage::Segment);
    assert!(err.to_string().contains("degenerate"), "{err}");

    let output = bin()
        .args(["run", "--input"])
        .arg(&input)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("segmentation"), "{stderr}");
}

#[test]
fn near_constant_prices_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("nearly_flat.csv");
    let mut text = String::from("date,close\n");
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    for k in 0..80u64 {
        let p = 100.0 + if k % 7 == 0 { 1e-6 } else { 0.0 };
        text.push_str(&format!("{},{p}\n", start + chrono::Days::new(k)));
    }
    fs::write(&input, text).unwrap();
    let report = execute(&quick_config(&input)).unwrap().report;
    assert!(report.risk.var.is_finite());
    assert!(report.risk.bvar <= report.risk.wvar);
}

#[test]
fn missing_input_names_load_stage() {
    let output = bin()
        .args(["run", "--input", "/nonexistent/prices.csv"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("load stage"), "{stderr}");
}

fn svg_fixture(breakpoints: Vec<usize>, n: usize) -> String {
    let start = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
    let rows = (0..=n)
        .map(|k| {
            (
                start + chrono::Days::new(k as u64),
                100.0 * (1.0 + 0.01 * (k as f64).sin()),
            )
        })
        .collect();
    let prices = PriceSeries::new(rows).unwrap();
    let returns = wvar::series::to_log_returns(&prices);
    let seg = Segmentation::new(breakpoints, n).unwrap();
    let report = RiskReport {
        alpha: 0.95,
        var: 0.02,
        wvar: 0.05,
        bvar: 0.004,
        per_scenario_var: vec![0.004, 0.05],
        worst_scenario: 1,
        best_scenario: 0,
        basis: wvar::risk::RiskBasis::FittedMixture,
    };
    render_svg(&prices, &returns, &seg, &report)
}

fn attr(tag: &str, name: &str) -> f64 {
    let key = format!("{name}=\"");
    let start = tag.find(&key).unwrap() + key.len();
    let end = start + tag[start..].find('"').unwrap();
    tag[start..end].parse().unwrap()
}

#[test]
fn svg_marks_every_breakpoint() {
    assert_eq!(
        svg_fixture(vec![], 300)
            .matches("class=\"changepoint\"")
            .count(),
        0
    );
    let bps: Vec<usize> = (1..=17).map(|k| k * 17).collect();
    let svg = svg_fixture(bps.clone(), 300);
    let marks: Vec<&str> = svg
        .lines()
        .filter(|l| l.contains("class=\"changepoint\""))
        .collect();
    assert_eq!(marks.len(), 17);
    for (line, bp) in marks.iter().zip(&bps) {
        assert_eq!(attr(line, "data-index") as usize, *bp);
    }
}

#[test]
fn svg_risk_lines_invert_to_thresholds() {
    let svg = svg_fixture(vec![100], 300);
    let panel = svg
        .lines()
        .find(|l| l.contains("class=\"panel-returns\""))
        .unwrap();
    let (lo, hi, top, bottom) = (
        attr(panel, "data-y-min"),
        attr(panel, "data-y-max"),
        attr(panel, "data-top"),
        attr(panel, "data-bottom"),
    );
    for (class, value) in [
        ("risk-var", 0.02),
        ("risk-wvar", 0.05),
        ("risk-bvar", 0.004),
    ] {
        let line = svg
            .lines()
            .find(|l| l.contains(&format!("class=\"{class}\"")))
            .unwrap();
        let y = attr(line, "y1");
        let back = lo + (bottom - y) / (bottom - top) * (hi - lo);
        // Coordinates carry three decimals.
        let tol = 1e-3 / (bottom - top) * (hi - lo);
        assert!((back + value).abs() <= tol, "{class}: {back} vs {}", -value);
    }
}

#[test]
fn simulate_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prices.csv");
    common::write_planted_prices(&input, 80, 5);
    let out = dir.path().join("run");
    let status = bin()
        .args([
            "run",
            "--k2",
            "2",
            "--k1",
            "1",
            "--restarts",
            "2",
            "--emit",
            "json",
            "--input",
        ])
        .arg(&input)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());

    // Both the full report and its bare model are accepted.
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let model_path = dir.path().join("model.json");
    fs::write(&model_path, report["model"].to_string()).unwrap();
    let sim = dir.path().join("sim.csv");
    let from_report = dir.path().join("sim_report.csv");
    let status = bin()
        .args(["simulate", "--seed", "9", "--counts", "30,40", "--model"])
        .arg(out.join(REPORT_FILE))
        .arg("--out")
        .arg(&from_report)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let status = bin()
        .args(["simulate", "--seed", "9", "--counts", "30,40", "--model"])
        .arg(&model_path)
        .arg("--out")
        .arg(&sim)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let prices = load_prices(&sim, &CsvSchema::default()).unwrap();
    assert_eq!(prices.len(), 71);
    assert_eq!(prices.prices()[0], 100.0);
    assert_eq!(fs::read(&sim).unwrap(), fs::read(&from_report).unwrap());
}

#[test]
fn fit_output_feeds_risk_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prices.csv");
    common::write_planted_prices(&input, 80, 8);
    let fitted = bin()
        .args([
            "fit",
            "--k2",
            "2",
            "--k1",
            "1",
            "--restarts",
            "2",
            "--input",
        ])
        .arg(&input)
        .output()
        .unwrap();
    assert!(
        fitted.status.success(),
        "{}",
        String::from_utf8_lossy(&fitted.stderr)
    );
    let model_path = dir.path().join("fit.json");
    fs::write(&model_path, &fitted.stdout).unwrap();

    let risk = bin()
        .args(["risk", "--alpha", "0.99", "--model"])
        .arg(&model_path)
        .output()
        .unwrap();
    assert!(
        risk.status.success(),
        "{}",
        String::from_utf8_lossy(&risk.stderr)
    );
    let report: RiskReport = serde_json::from_slice(&risk.stdout).unwrap();
    assert_eq!(report.alpha, 0.99);
    assert!(report.bvar <= report.var && report.var <= report.wvar);

    let sim = dir.path().join("sim.csv");
    let status = bin()
        .args(["simulate", "--model"])
        .arg(&model_path)
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(load_prices(&sim, &CsvSchema::default()).unwrap().len(), 161);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prices.csv");
    common::write_planted_prices(&input, 60, 2);
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "input = {:?}\nk2 = 2\nk1 = 1\nrestarts = 2\nalpha = 0.9\nemit = \"json\"\n",
            input
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--alpha", "0.99", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["risk"]["alpha"], 0.99);
    assert_eq!(report["provenance"]["config"]["k2"], 2);
}
