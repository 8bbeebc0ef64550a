//! End-to-end runs of the `msm-iv` binary: determinism, exit codes and
//! output shapes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msm-iv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn desk_config(n: usize, reps: usize) -> String {
    format!(
        r#"{{
  "dgp": "desk",
  "n": {n},
  "replications": {reps},
  "seed": 42,
  "estimators": ["iv_ipw", "iv_mr"],
  "bootstrap": 0
}}"#
    )
}

#[test]
fn validate_accepts_good_and_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.json", &desk_config(100, 1));
    let out = run(&["simulate", "--config", &good, "--validate"]);
    assert!(out.status.success(), "{out:?}");

    // Unknown estimator: config error before any work (exit 2).
    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{ "dgp": "desk", "n": 10, "seed": 1, "estimators": ["banana"] }"#,
    );
    let out = run(&["simulate", "--config", &bad, "--validate"]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // Missing seed: no implicit nondeterminism allowed (exit 2).
    let no_seed = write_config(dir.path(), "noseed.json", r#"{ "dgp": "desk", "n": 10 }"#);
    let out = run(&["simulate", "--config", &no_seed, "--validate"]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown field: rejected (exit 2).
    let extra = write_config(
        dir.path(),
        "extra.json",
        r#"{ "dgp": "desk", "n": 10, "seed": 1, "bogus": true }"#,
    );
    let out = run(&["simulate", "--config", &extra, "--validate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &desk_config(25, 1));
    let out1 = dir.path().join("out1");
    let out2 = dir.path().join("out2");
    for out in [&out1, &out2] {
        let r = run(&[
            "simulate",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{r:?}");
    }
    let p1 = fs::read(out1.join("panel.csv")).unwrap();
    let p2 = fs::read(out2.join("panel.csv")).unwrap();
    assert_eq!(p1, p2, "same config, same bytes");

    // Row count n * J plus header.
    let text = String::from_utf8(p1).unwrap();
    assert_eq!(text.lines().count(), 1 + 25 * 2);
    assert!(out1.join("provenance.json").exists());
}

#[test]
fn simulate_zero_subjects_yields_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &desk_config(0, 1));
    let out = dir.path().join("out");
    let r = run(&["simulate", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let text = fs::read_to_string(out.join("panel.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("subject_id,time,"));
}

#[test]
fn oracle_passes_on_desk_and_flags_violations() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "desk.json",
        r#"{ "dgp": "desk", "n": 10, "seed": 7, "estimators": ["iv_mr", "sra_ipw"] }"#,
    );
    let out = dir.path().join("ok");
    let r = run(&["oracle", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{r:?}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("oracle_report.json")).unwrap()).unwrap();
    assert_eq!(report["all_identities_pass"], true);
    // The multiply robust estimator is centered under the first four
    // patterns and off under the all-wrong negative control.
    let rows = report["plim_matrix"].as_array().unwrap();
    let mr_all_wrong = rows
        .iter()
        .find(|r| r["pattern"] == "all_wrong" && r["estimator"] == "iv_mr")
        .unwrap();
    assert!(mr_all_wrong["max_abs_bias"].as_f64().unwrap() > 1e-2);
    let mr_ok = rows
        .iter()
        .find(|r| r["pattern"] == "condition_ii" && r["estimator"] == "iv_mr")
        .unwrap();
    assert!(mr_ok["max_abs_bias"].as_f64().unwrap() < 1e-8);

    // Compliance-type violation: identity failure, exit 4.
    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{ "dgp": "desk_assumption5_violating", "n": 10, "seed": 7, "estimators": ["iv_mr"] }"#,
    );
    let out_bad = dir.path().join("bad");
    let r = run(&["oracle", "--config", &bad, "--out", out_bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "{r:?}");
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_bad.join("oracle_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["all_identities_pass"], false);
    let failed: Vec<&str> = report["identities"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["pass"] == false)
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert!(
        failed.contains(&"instrument_contrast_identity"),
        "report names the failing identity: {failed:?}"
    );
}

#[test]
fn fit_writes_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &desk_config(3000, 1));
    let sim_out = dir.path().join("sim");
    assert!(run(&[
        "simulate",
        "--config",
        &config,
        "--out",
        sim_out.to_str().unwrap()
    ])
    .status
    .success());

    let fit_out = dir.path().join("fit");
    let r = run(&[
        "fit",
        "--config",
        &config,
        "--panel",
        sim_out.join("panel.csv").to_str().unwrap(),
        "--out",
        fit_out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{r:?}");
    let csv_text = fs::read_to_string(fit_out.join("estimates.csv")).unwrap();
    let lines: Vec<&str> = csv_text.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two estimators: {csv_text}");
    assert!(lines[1].starts_with("iv_ipw,true"));
    assert!(lines[2].starts_with("iv_mr,true"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit_out.join("estimates.json")).unwrap()).unwrap();
    let estimates = report["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 2);
    // Shared nuisance fingerprint: both estimators were fit from the same
    // correctly-specified nuisance models.
    assert_eq!(
        estimates[0]["nuisance_fingerprint"],
        estimates[1]["nuisance_fingerprint"]
    );
}

#[test]
fn robustness_matrix_shape_and_content() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        r#"{
  "dgp": "desk",
  "n": 800,
  "replications": 2,
  "seed": 11,
  "estimators": ["iv_mr", "sra_ipw"]
}"#,
    );
    let out = dir.path().join("rob");
    let r = run(&["robustness", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{r:?}");
    let text = fs::read_to_string(out.join("robustness.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5 * 2, "5 patterns x 2 estimators");
    // The multiply robust estimator has negligible population bias in the
    // first four rows; sra_ipw is biased everywhere on the confounded desk.
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        let plim_bias: f64 = cells[2].parse().unwrap();
        match (cells[0], cells[1]) {
            ("all_wrong", "iv_mr") => assert!(plim_bias > 1e-2),
            (_, "iv_mr") => assert!(plim_bias < 1e-6, "{line}"),
            (_, "sra_ipw") => assert!(plim_bias > 0.05, "{line}"),
            _ => unreachable!(),
        }
    }
}

#[test]
fn efficiency_report_orders_variances() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        r#"{
  "dgp": "desk",
  "n": 500,
  "replications": 3,
  "seed": 13,
  "estimators": ["iv_eff"],
  "h_draws": 3
}"#,
    );
    let out = dir.path().join("eff");
    let r = run(&["efficiency", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{r:?}");
    let text = fs::read_to_string(out.join("efficiency.csv")).unwrap();
    let mut eff0 = None;
    let mut ipw0 = None;
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[1] == "0" {
            let v: f64 = cells[2].parse().unwrap();
            match cells[0] {
                "iv_eff" => eff0 = Some(v),
                "iv_ipw" => ipw0 = Some(v),
                _ => {}
            }
        }
    }
    assert!(eff0.unwrap() <= ipw0.unwrap());
}
