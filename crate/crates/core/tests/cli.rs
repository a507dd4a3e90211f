use std::path::Path;
use std::process::{Command, Output};

use ncodid::cli::{PanelEstimate, Truth};

fn ncodid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncodid"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .env_remove("NCODID_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path) -> (String, String) {
    ok(ncodid(dir, &["simulate", "--seed", "21", "--n-units", "3000", "--target-atet", "0.1"]));
    (
        dir.join("data.csv").to_str().unwrap().to_owned(),
        dir.join("schema.json").to_str().unwrap().to_owned(),
    )
}

#[test]
fn simulated_pipeline_covers_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, schema) = simulate(d);
    ok(ncodid(d, &["match", "--input", &data, "--schema", &schema]));
    ok(ncodid(
        d,
        &[
            "estimate", "--input", &data, "--schema", &schema, "--nco-years", "1,3", "--estimator", "unadj,did",
            "--bootstrap", "400", "--seed", "5",
        ],
    ));
    let truth: Truth = serde_json::from_slice(&std::fs::read(d.join("truth.json")).unwrap()).unwrap();
    let rows: Vec<PanelEstimate> = serde_json::from_slice(&std::fs::read(d.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r.estimate.point.estimator.needs_nco()) {
        let e = &r.estimate;
        assert!(e.ci_low <= truth.population_atet && truth.population_atet <= e.ci_high, "{}: {e:?}", r.panel);
    }
    // the unadjusted contrast is confounded upward
    assert!(rows.iter().any(|r| !r.estimate.point.estimator.needs_nco() && r.estimate.ci_low > truth.population_atet));

    ok(ncodid(d, &["report"]));
    for panel in ["n1_q0.5", "n3_q0.5"] {
        let svg = std::fs::read_to_string(d.join(format!("forest_{panel}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">Unadj<") && svg.contains(">DiD<"));
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["commands"]["estimate"]["parameters"]["bootstrap"]["seed"], 5);
    assert_eq!(report["commands"]["match"]["input"], "data.csv");
    assert_eq!(report["nco_specs"].as_array().unwrap().len(), 2);
}

#[test]
fn stratify_and_qq_run_on_matched_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, schema) = simulate(d);
    ok(ncodid(d, &["match", "--input", &data, "--schema", &schema, "--nco-years", "3"]));
    let base = ["--input", &data, "--schema", &schema, "--bootstrap", "200", "--seed", "3"];
    let mut args = vec!["stratify", "--nco-years", "3", "--stratify-by", "c0", "--bins=-1,0,1"];
    args.extend(base);
    ok(ncodid(d, &args));
    let strata: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("strata.json")).unwrap()).unwrap();
    let labels: Vec<&str> = strata["panels"][0]["strata"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels.last(), Some(&"all"));
    assert_eq!(labels.len(), 5);

    let mut args = vec!["qq"];
    args.extend(base);
    ok(ncodid(d, &args));
    let curve = std::fs::read_to_string(d.join("qq_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 102);
    assert!(curve.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn malformed_csv_exits_2_naming_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, schema) = simulate(d);
    let text = std::fs::read_to_string(&data).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "treatment").unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut cells: Vec<&str> = lines[5].split(',').collect();
    cells[col] = "maybe";
    lines[5] = cells.join(",");
    let bad = d.join("bad.csv");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();

    let out = ncodid(
        d,
        &["estimate", "--input", bad.to_str().unwrap(), "--schema", &schema, "--seed", "1", "--estimator", "unadj"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "data");
    assert_eq!(err["column"], "treatment");
    assert!(err["row"].as_u64().is_some());
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ncodid(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("--seed"));

    // the environment variable is an accepted fallback
    let out = Command::new(env!("CARGO_BIN_EXE_ncodid"))
        .args(["simulate", "--n-units", "300", "--output-dir"])
        .arg(dir.path())
        .env("NCODID_SEED", "4")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_needs_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = ncodid(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(2));
}
