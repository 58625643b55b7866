mod common;

use std::process::Command;

fn memcompose(args: &[&str]) -> std::process::Output {
    Command::new(common::bin()).args(args).output().unwrap()
}

#[test]
fn topology_is_json() {
    let out = memcompose(&["topology"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["nodes"].as_object().is_some_and(|n| !n.is_empty()));
    assert!(v["page_size_bytes"].as_u64().unwrap() >= 4096);
}

#[test]
fn report_without_inputs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = memcompose(&["report", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn profile_derive_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let prof = format!("{d}/p.jsonl");
    let out = memcompose(&[
        "profile", "--mode", "interrupt", "-o", &prof, "--", common::bin(), "synth", "phases", "--footprint", "256M",
        "--fraction", "1", "--compute", "0.1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = format!("{d}/m.json");
    let csv = format!("{d}/m.csv");
    let out = memcompose(&["derive", &prof, "-o", &metrics, "--csv", &csv]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["header"]["topology"]["nodes"].is_object());
    assert!(m["metrics"]["cold_fraction"].as_f64().unwrap() < 0.1);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("# memcompose-header "));
    // Derive refuses to overwrite.
    assert_eq!(memcompose(&["derive", &prof, "-o", &metrics]).status.code(), Some(1));
    let out = memcompose(&["report", "--output-dir", &format!("{d}/r"), &prof, &metrics]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("r/p.capacity.svg").exists());
    assert!(dir.path().join("r/m.capacity.svg").exists());
}

#[test]
fn probe_appends_self_describing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("probes.jsonl");
    let r = results.to_str().unwrap();
    for _ in 0..2 {
        let out = memcompose(&["probe", "chase", "--working-set", "1M", "--repetitions", "1", "--seed", "9", "--results", r]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&results)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["header"]["seeds"], serde_json::json!([9]));
    assert_eq!(rows[0]["result"]["seed"], 9);
    assert!(rows[0]["result"]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(common::bin())
        .args(["profile", "--period", "0.1", "--", "true"])
        .env("MEMCOMPOSE_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("profile.jsonl").exists());
}

#[test]
fn single_node_scale_links_is_an_environment_error() {
    if common::memory_nodes().len() > 1 {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = memcompose(&["scale-links", "--output-dir", dir.path().to_str().unwrap(), "--", "true"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_from_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.toml");
    std::fs::write(
        &spec,
        format!(
            "repetitions = 1\nsample_period_secs = 0.1\noutput_dir = {:?}\n[workload]\nargv = [{:?}, \"synth\", \"spin\", \"--iterations\", \"1000\"]\n[sweep]\nkind = \"capacity_fractions\"\nfractions = [0.0, 0.75]\n",
            dir.path().join("out"),
            common::bin()
        ),
    )
    .unwrap();
    let out = memcompose(&["sweep-capacity", "--spec", spec.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/sweep_report.json")).unwrap()).unwrap();
    assert_eq!(report["points"].as_array().unwrap().len(), 2);
    assert!(report["header"]["topology"].is_object());
    let out = memcompose(&["report", "--output-dir", dir.path().join("r").to_str().unwrap(), dir.path().join("out/sweep_report.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("r/sweep_report.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
