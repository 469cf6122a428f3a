use std::path::Path;
use std::process::{Command, Output};

use cpsolver::formats::{read_json, read_results, write_dataset};
use cpsolver_core::grid::Coord;
use cpsolver_core::sim::{Splits, Trajectory, TrajectoryDataset};

fn cpsolver(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpsolver"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = cpsolver(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const STUB: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/stubs/stub_predictor.py");

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let args = ["gen-data", "--map", "warehouse-small", "--agents", "4", "--count", "40", "--seed", "7"];
    ok(&a, &args);
    ok(&b, &args);
    ok(&c, &["gen-data", "--map", "warehouse-small", "--agents", "4", "--count", "40", "--seed", "8"]);
    for f in ["dataset.jsonl", "dataset.manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    assert_ne!(read(a.join("dataset.jsonl")), read(c.join("dataset.jsonl")));
}

#[test]
fn configuration_errors_exit_2_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 7] = [
        (&["gen-data", "--map", "/nonexistent/small.json"], "--map"),
        (&["gen-data"], "--map"),
        (&["lifelong", "--map", "warehouse-small", "--delta", "1.5"], "--delta"),
        (&["lifelong", "--map", "warehouse-small", "--horizon", "10", "--w-hat", "5"], "--w-hat"),
        (&["lifelong", "--map", "warehouse-small", "--horizon", "7"], "--total-steps"),
        (&["calibrate", "--map", "warehouse-small", "--dataset", "/nonexistent.jsonl"], "--dataset"),
        (&["lifelong", "--map", "warehouse-small", "--predictor", "external"], "--predictor-cmd"),
    ];
    for (args, flag) in cases {
        let o = cpsolver(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(flag), "{args:?}: {err}");
    }
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"map": "warehouse-small", "horizn": 3}"#).unwrap();
    let o = cpsolver(dir.path(), &["lifelong", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizn"));
    // Nothing is written before validation passes.
    assert!(!dir.path().join("events.jsonl").exists());
}

#[test]
fn calibrate_prints_the_rank_and_static_agents_give_zero_radii() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-data", "--map", "warehouse-small", "--agents", "2", "--count", "3980", "--steps", "20", "--seed", "1"],
    );
    let dataset = dir.path().join("dataset.jsonl");
    let stdout = ok(
        dir.path(),
        &["calibrate", "--map", "warehouse-small", "--dataset", dataset.to_str().unwrap(), "--horizon", "5"],
    );
    assert!(stdout.contains("cal2 = 199"), "{stdout}");
    assert!(stdout.contains("p = 190"), "{stdout}");
    assert!(stdout.contains("test coverage = "), "{stdout}");
    let art: serde_json::Value = read_json(&dir.path().join("calibration.json")).unwrap();
    assert_eq!(art["H"], 5);

    let still: Vec<Trajectory> = (0..500)
        .map(|i| Trajectory {
            traj_id: i,
            positions: vec![vec![Coord::new(1, 1 + i % 5), Coord::new(5, 2)]; 12],
        })
        .collect();
    let data = TrajectoryDataset {
        map: "warehouse-small".into(),
        agents: 2,
        steps: 12,
        seed: 0,
        trajectories: still,
        splits: Splits::standard(500),
    };
    let static_path = dir.path().join("still.jsonl");
    write_dataset(&static_path, &data).unwrap();
    let out = dir.path().join("still");
    ok(
        &out,
        &[
            "calibrate",
            "--map",
            "warehouse-small",
            "--dataset",
            static_path.to_str().unwrap(),
            "--predictor",
            "constant",
            "--horizon",
            "3",
        ],
    );
    let art: serde_json::Value = read_json(&out.join("calibration.json")).unwrap();
    assert_eq!(art["C"], serde_json::json!([0.0, 0.0, 0.0]));
}

#[test]
fn solve_without_uncontrolled_agents_is_plain_ecbs() {
    let dir = tempfile::tempdir().unwrap();
    let (cp, plain) = (dir.path().join("cp"), dir.path().join("plain"));
    let common = ["solve", "--map", "warehouse-small", "--n-controlled", "8", "--m-uncontrolled", "0", "--no-timing"];
    ok(&cp, &[&common[..], &["--solver", "cp"]].concat());
    ok(&plain, &[&common[..], &["--solver", "plain"]].concat());
    assert_eq!(read(cp.join("solution.json")), read(plain.join("solution.json")));
    let sol: serde_json::Value = read_json(&cp.join("solution.json")).unwrap();
    assert_eq!(sol["paths"].as_object().unwrap().len(), 8);
    assert_eq!(sol["runtime_s"], 0.0);
}

#[test]
fn solver_failures_exit_1_with_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    // Nine walkers in a 5x3 room leave no free way through their obstacle sets.
    let room = dir.path().join("room.map");
    std::fs::write(&room, "type octile\nheight 3\nwidth 5\nmap\n.....\n.....\n.....\n").unwrap();
    let o = cpsolver(
        dir.path(),
        &[
            "solve",
            "--map",
            room.to_str().unwrap(),
            "--n-controlled",
            "2",
            "--m-uncontrolled",
            "9",
            "--solver",
            "obstacle",
            "--horizon",
            "4",
            "--no-timing",
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let record: serde_json::Value = read_json(&dir.path().join("error.json")).unwrap();
    assert_eq!(record["command"], "solve");
    assert!(record["error"].is_string() && record["message"].is_string());
}

#[test]
fn lifelong_is_deterministic_and_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"map": "warehouse-small", "predictor": "goal-posterior", "calibration_trajectories": 120,
            "scenario": {"n_controlled": 6, "m_uncontrolled": 3, "horizon": 5, "conflict_horizon": 5,
                         "total_steps": 40, "seed": 3}}"#,
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&a, &["lifelong", "--config", cfg, "--no-timing"]);
    ok(&b, &["lifelong", "--config", cfg, "--no-timing"]);
    ok(&c, &["lifelong", "--config", cfg, "--no-timing", "--total-steps", "20"]);
    for f in ["events.jsonl", "metrics.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let events = String::from_utf8(read(a.join("events.jsonl"))).unwrap();
    assert_eq!(events.lines().count(), 41);
    let metrics: serde_json::Value = read_json(&c.join("metrics.json")).unwrap();
    assert_eq!(metrics["steps"], 20);
    assert_eq!(metrics["runtime_s"], 0.0);
}

#[test]
fn external_predictor_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (builtin, external) = (dir.path().join("builtin"), dir.path().join("external"));
    let common = [
        "lifelong",
        "--map",
        "warehouse-small",
        "--kind",
        "pred",
        "--n-controlled",
        "5",
        "--m-uncontrolled",
        "3",
        "--horizon",
        "5",
        "--total-steps",
        "30",
        "--no-timing",
    ];
    ok(&builtin, &[&common[..], &["--predictor", "constant"]].concat());
    let cmd = format!("python3 {STUB} constant");
    ok(&external, &[&common[..], &["--predictor-cmd", cmd.as_str()]].concat());
    for f in ["events.jsonl", "metrics.json"] {
        assert_eq!(read(builtin.join(f)), read(external.join(f)), "{f}");
    }

    let report = ok(dir.path(), &["check-predictor", "--predictor-cmd", cmd.as_str()]);
    assert_eq!(report.lines().filter(|l| l.starts_with("PASS ")).count(), 6, "{report}");
    let broken = format!("python3 {STUB} short");
    let o = cpsolver(dir.path(), &["check-predictor", "--predictor-cmd", broken.as_str()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL horizon-length"));
}

#[test]
fn bench_runs_the_full_matrix_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let common = [
        "bench",
        "--map",
        "warehouse-small",
        "--n-controlled",
        "6",
        "--m-uncontrolled",
        "3",
        "--horizon",
        "5",
        "--total-steps",
        "30",
        "--calibration-trajectories",
        "100",
        "--predictor",
        "goal-posterior",
        "--no-timing",
    ];
    ok(&a, &[&common[..], &["--jobs", "1"]].concat());
    ok(&b, &[&common[..], &["--jobs", "3"]].concat());
    assert_eq!(read(a.join("results.csv")), read(b.join("results.csv")));
    assert_eq!(read(a.join("summary.json")), read(b.join("summary.json")));
    let rows = read_results(&a.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 3);
    for kind in ["IGNORE", "OBSTACLE", "PRED", "CP"] {
        let seeds: Vec<u64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.seed).collect();
        assert_eq!(seeds, [0, 1, 2], "{kind}");
    }
    assert!(rows.iter().all(|r| (r.kind == "CP") == r.coverage.is_some()));
    assert!(rows.iter().all(|r| u8::from(r.collisions > 0) == r.violations));

    let swept = dir.path().join("swept");
    ok(
        &swept,
        &[&common[..], &["--kinds", "ignore,cp", "--runs", "2", "--sweep-horizon", "3,5", "--sweep-uncontrolled", "1,2"]]
            .concat(),
    );
    let rows = read_results(&swept.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.w_hat == r.horizon));
}
