use std::path::Path;
use std::process::{Command, Output};

fn lnnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lnnet")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exact_xor_has_unit_ssr() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("xor.csv");
    let report = dir.path().join("ssr.json");
    assert!(lnnet(&["gen", "--kind", "xor", "--output", p(&data)]).status.success());
    let out = lnnet(&["ssr", "--input", p(&data), "--output", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert!((r["ssr"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((r["lssr"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn synth_then_verify_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let model = dir.path().join("model.json");
    let trace = dir.path().join("trace.json");
    let report = dir.path().join("verify.json");
    let gen = ["gen", "--kind", "random", "--m", "12", "--dim", "3", "--seed", "5", "--output", p(&data)];
    assert!(lnnet(&gen).status.success());
    let out = lnnet(&["synth", "--input", p(&data), "--out", p(&model), "--trace", p(&trace), "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(json(&trace)["layers"].is_array());

    let out = lnnet(&["verify", "--net", p(&model), "--input", p(&data), "--output", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["accuracy"].as_f64(), Some(1.0));
    assert_eq!(r["points"].as_u64(), Some(12));
    assert!(!r["layers"].as_array().unwrap().is_empty());
}

#[test]
fn multiclass_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let model = dir.path().join("model.json");
    let gen = ["gen", "--kind", "random", "--m", "9", "--dim", "2", "--classes", "3", "--seed", "8", "--output", p(&data)];
    assert!(lnnet(&gen).status.success());
    assert!(lnnet(&["synth", "--input", p(&data), "--out", p(&model)]).status.success());
    let out = lnnet(&["verify", "--net", p(&model), "--input", p(&data), "--format", "csv"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], f[2], "misclassified row {row}");
    }
}

#[test]
fn hessian_csv_has_one_row_per_group_count() {
    let out = lnnet(&["hessian", "--dim", "12", "--groups", "1,3", "--samples", "50", "--seed", "7", "--format", "csv"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("groups,group_size"));
    let ratio: f64 = lines[2].split(',').nth(6).unwrap().parse().unwrap();
    assert!(ratio > 1.0, "grouping should raise the measure, got {ratio}");
}

#[test]
fn break_lssr_writes_a_loadable_net() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c.csv");
    let net = dir.path().join("psi.json");
    assert!(lnnet(&["gen", "--kind", "table", "--row", "c", "--m", "60", "--seed", "3", "--output", p(&data)]).status.success());
    let out = lnnet(&["break-lssr", "--input", p(&data), "--net", p(&net)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["ssr_after"].as_f64().unwrap() < r["lssr"].as_f64().unwrap());
    let doc = json(&net);
    assert_eq!(doc["layers"].as_array().unwrap().len(), 3);
}

#[test]
fn shatter_reports_every_labeling() {
    let out = lnnet(&["shatter", "--points", "4", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["labelings"].as_u64(), Some(14));
    assert_eq!(r["shattered"].as_bool(), Some(true));
}

#[test]
fn wrong_dimension_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let xor = dir.path().join("xor.csv");
    let wide = dir.path().join("wide.csv");
    let model = dir.path().join("model.json");
    assert!(lnnet(&["gen", "--kind", "xor", "--output", p(&xor)]).status.success());
    assert!(lnnet(&["gen", "--kind", "random", "--m", "6", "--dim", "4", "--output", p(&wide)]).status.success());
    assert!(lnnet(&["synth", "--input", p(&xor), "--out", p(&model)]).status.success());
    let out = lnnet(&["verify", "--net", p(&model), "--input", p(&wide)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects 2 inputs"));
}

#[test]
fn malformed_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,label\n0,0\nnope,1\n").unwrap();
    let out = lnnet(&["ssr", "--input", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert_eq!(lnnet(&["ssr", "--input", "/definitely/not/here.csv"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lnnet(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(lnnet(&["gen", "--kind", "table"]).status.code(), Some(2));
    assert_eq!(lnnet(&["gen", "--kind", "table", "--row", "z"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_lnnet"))
        .args(["gen", "--kind", "xor"])
        .env("LNNET_EPS_EQ", "-1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lnnet(&["--help"]).status.code(), Some(0));
}
