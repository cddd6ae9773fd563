use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn owe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owe")).args(args).env("SOURCE_DATE_EPOCH", "1700000000").output().unwrap()
}

#[test]
fn probe_writes_csv_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe");
    let o = owe(&["probe", "--scenario", scenario("probe.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["run.csv", "probe_log.csv", "layers.csv", "estimate.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let run = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(run.contains("experiment,probe"));
}

#[test]
fn text_format_is_pinned_by_source_date_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = owe(&[
        "coverage",
        "--scenario",
        scenario("coverage_line.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--format",
        "text",
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("generated_at: unix:1700000000"));
    assert!(text.contains("scenario_digest: "));
}

#[test]
fn seed_and_margin_overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = owe(&[
        "blockage",
        "--scenario",
        scenario("blockage.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "42",
        "--margin",
        "0.1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(run.contains("seed,42"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 1\n[layout]\nroom_m = [5.0, 5.0]\n[layout.grid]\nnx = 3\nny = 3\n[[links]]\nap_ea = 12\nentries = [{ ea = 1 }]\n").unwrap();
    let o = owe(&["single-bss", "--scenario", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("EA12"));

    let o = owe(&[
        "coverage",
        "--scenario",
        scenario("coverage_line.toml").to_str().unwrap(),
        "--out",
        out,
        "--margin",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let hot = dir.path().join("hot.toml");
    let text = fs::read_to_string(scenario("coverage_line.toml")).unwrap().replace("[0.0, 10.0, 40.0, 70.0]", "[90.0]");
    fs::write(&hot, text).unwrap();
    let o = owe(&["coverage", "--scenario", hot.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("largest feasible"));

    let lost = dir.path().join("lost.toml");
    fs::write(
        &lost,
        "version = 1\n[layout.grid]\nnx = 2\nny = 1\norigin_m = [0.0, 0.0]\n[[links]]\nap_ea = 2\nentries = [{ ea = 1 }]\n[optimizer]\nrestarts = 1\n[experiment.blockage]\npath = [1, 2]\nblocked_edge = [1, 2]\n",
    )
    .unwrap();
    let o = owe(&["blockage", "--scenario", lost.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(4));

    let o = owe(&["probe", "--scenario", "/definitely/missing.toml", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}
