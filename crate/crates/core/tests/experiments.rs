use std::fs;
use std::path::{Path, PathBuf};

use owe_core::circuit::EaCircuitParams;
use owe_core::ether::{to_db, BssLink, ChannelMatrix, GainVector};
use owe_core::experiments::*;
use owe_core::optimizer::link_snr;
use owe_core::protocol::BlockageStatus;
use owe_core::report::{emit_report, Cell, ReportFormat, RunStatus};
use owe_core::scenario::{load_scenario, parse_scenario, LineCoupling, Scenario};
use owe_core::OweError;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> Scenario {
    load_scenario(&scenarios().join(name)).unwrap()
}

fn quick(mut s: Scenario) -> Scenario {
    s.optimizer.restarts = 2;
    s.optimizer.alpha = 0.98;
    s
}

#[test]
fn room_matrix_matches_fixture() {
    let s = scenario("single_bss_3x3.toml");
    let (_, h) = scenario_channels(&s).unwrap();
    let want =
        ChannelMatrix::read_csv(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/h_3x3_room.csv")).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            let (a, b) = (h.get(i, j), want.get(i, j));
            assert!((a / b - 1.0).abs() < 1e-9, "({i},{j}): {a} vs {b}");
        }
    }
}

#[test]
fn defaults_file_is_the_reference_design() {
    let s = scenario("defaults.toml");
    assert_eq!(s.circuit, EaCircuitParams::default());
    assert_eq!(s.numerics, Default::default());
}

#[test]
fn every_shipped_scenario_validates() {
    for entry in fs::read_dir(scenarios()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let s = load_scenario(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert_eq!(parse_scenario(&s.to_toml()).unwrap(), s, "{}", p.display());
        }
    }
}

#[test]
fn coverage_muted_relays() {
    let mut s = scenario("coverage_line.toml");
    s.experiment.coverage.pa_gains = vec![0.0];
    let (res, _) = run_coverage(&s).unwrap();
    assert!(res.rows[0].snr_full > 0.0);
    assert!(res.rows[1..].iter().all(|r| r.snr_full == 0.0 && r.snr_chain == 0.0));
}

#[test]
fn coverage_chain_agrees_without_feedback() {
    let mut s = scenario("coverage_line.toml");
    s.experiment.coverage.coupling = LineCoupling::Adjacent;
    s.experiment.coverage.self_channels = false;
    s.experiment.coverage.pa_gains = vec![1.0, 10.0, 70.0];
    let (res, _) = run_coverage(&s).unwrap();
    for r in &res.rows {
        assert!(r.divergence_db().abs() <= 1.0, "{r:?}");
    }
}

#[test]
fn coverage_unstable_gain_names_the_limit() {
    let mut s = scenario("coverage_line.toml");
    s.experiment.coverage.pa_gains = vec![80.0];
    match run_coverage(&s) {
        Err(OweError::GainInfeasible { requested, max_feasible }) => {
            assert!(max_feasible < requested && max_feasible > 1e5);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn coverage_rejects_grids() {
    assert!(matches!(run_coverage(&scenario("probe.toml")), Err(OweError::Scenario(_))));
}

#[test]
fn db_columns_match_linear_columns() {
    let mut s = scenario("coverage_line.toml");
    s.experiment.coverage.pa_gains = vec![10.0, 40.0];
    let (_, report) = run_coverage(&s).unwrap();
    let t = report.table("coverage").unwrap();
    let (db, lin) = (t.column("snr_db").unwrap(), t.column("snr").unwrap());
    for row in &t.rows {
        if let (Cell::Db(d), Cell::Raw(v)) = (&row[db], &row[lin]) {
            if *v > 0.0 {
                assert!((d - 10.0 * v.log10()).abs() <= 1e-9);
            }
        } else {
            panic!("unexpected cells");
        }
    }
}

#[test]
fn single_bss_csv_shape_and_determinism() {
    let mut s = quick(scenario("single_bss_3x3.toml"));
    s.experiment.single_bss.entries = vec![6];
    let dir = tempfile::tempdir().unwrap();
    let write = |sub: &str| {
        let (_, report) = run_single_bss(&s).unwrap();
        emit_report(&report, &dir.path().join(sub), ReportFormat::Csv).unwrap();
    };
    write("a");
    write("b");
    let snr = fs::read_to_string(dir.path().join("a/snr.csv")).unwrap();
    assert_eq!(snr.lines().next().unwrap(), "entry_ea,snr_db,improvement_db");
    for name in ["run.csv", "snr.csv", "snr_detail.csv", "gains.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn text_report_carries_digest() {
    let s = scenario("probe.toml");
    let (_, report) = run_probe(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path(), ReportFormat::Text).unwrap();
    let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains(&s.digest()));
}

// The grid is symmetric under transposition and EA9 is a fixed point, so
// entries EA2 and EA4 face mirror-image problems.
#[test]
fn transposed_entries_are_equivalent() {
    let s = scenario("single_bss_3x3.toml");
    let (_, h) = scenario_channels(&s).unwrap();
    let transpose: Vec<usize> = (0..9).map(|k| (k % 3) * 3 + k / 3).collect();
    let noise = s.noise_vectors(9).unwrap();
    let model = s.noise_model();
    let l2 = BssLink::single(9, 1, 26e-6, 8).unwrap();
    let l4 = BssLink::single(9, 3, 26e-6, 8).unwrap();
    let g = GainVector::new((0..9).map(|k| 2e3 * (1.0 + k as f64)).collect()).unwrap();
    let gt = GainVector::new((0..9).map(|k| g.as_slice()[transpose[k]]).collect()).unwrap();
    let (a, b) = (link_snr(&h, &g, &l2, &noise, model), link_snr(&h, &gt, &l4, &noise, model));
    assert!(a > 0.0 && (a / b - 1.0).abs() < 1e-9, "{a} vs {b}");

    let mut q = quick(s.clone());
    q.experiment.single_bss.entries = vec![2, 4];
    let (res, _) = run_single_bss(&q).unwrap();
    assert!((to_db(res.rows[0].snr) - to_db(res.rows[1].snr)).abs() < 0.5);
    assert_eq!(res.rows[0].result.best_gains.argmax(), 1);
    assert_eq!(res.rows[1].result.best_gains.argmax(), 3);
}

#[test]
fn duplicate_links_rejected() {
    let mut s = scenario("multi_bss_case1.toml");
    s.links[1] = s.links[0].clone();
    assert!(run_multi_bss(&quick(s)).is_err());
}

#[test]
fn single_point_sweep_equals_multi_bss() {
    let mut s = quick(scenario("power_sweep.toml"));
    s.experiment.sweep.points = 1;
    s.experiment.sweep.ratio_min = 1.0;
    let (pts, _) = run_power_sweep(&s).unwrap();
    let (multi, _) = run_multi_bss(&s).unwrap();
    for (a, b) in pts[0].rows.iter().zip(&multi.rows) {
        assert!((a.sinr / b.sinr - 1.0).abs() < 1e-12);
    }
}

#[test]
fn blockage_off_path_is_clear() {
    let mut s = quick(scenario("blockage.toml"));
    s.experiment.blockage.blocked_edge = Some([2, 3]);
    let (run, report) = run_blockage(&s).unwrap();
    assert_eq!(run.status, BlockageStatus::Clear);
    assert!(run.snr_after.is_none());
    assert_eq!(report.status, RunStatus::Ok);
}

#[test]
fn blockage_localized_and_rerouted() {
    let (run, _) = run_blockage(&quick(scenario("blockage.toml"))).unwrap();
    assert_eq!(run.status, BlockageStatus::Localized(5, 10));
    assert!(run.snr_after.unwrap() > run.snr_blocked);
}

#[test]
fn isolated_entry_is_coverage_loss() {
    let text = r#"
version = 1
[layout.grid]
nx = 2
ny = 1
origin_m = [0.0, 0.0]
[[links]]
ap_ea = 2
entries = [{ ea = 1 }]
[experiment.blockage]
path = [1, 2]
blocked_edge = [1, 2]
"#;
    let (run, report) = run_blockage(&quick(parse_scenario(text).unwrap())).unwrap();
    assert_eq!(run.status, BlockageStatus::Localized(0, 1));
    assert!(run.coverage_loss);
    assert_eq!(report.status, RunStatus::CoverageLoss);
}
