use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use cpsolver::external::{conformance_suite, parse_response, ExternalPredictor, DEFAULT_STARTUP};
use cpsolver_core::grid::{Coord, GridMap};
use cpsolver_core::prediction::{predict_constant, ObservationHistory, PredictionError, Predictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stub(mode: &str) -> Vec<String> {
    let script = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/stubs/stub_predictor.py");
    vec!["python3".into(), script.into(), mode.into()]
}

fn open(mode: &str) -> ExternalPredictor {
    ExternalPredictor::spawn(&stub(mode), Duration::from_secs(1), DEFAULT_STARTUP).unwrap()
}

fn history(rng: &mut ChaCha8Rng, agents: &[usize]) -> ObservationHistory {
    let tracks: BTreeMap<usize, Vec<Coord>> = agents
        .iter()
        .map(|&a| (a, (0..4).map(|_| Coord::new(rng.gen_range(0..20), rng.gen_range(0..30))).collect()))
        .collect();
    ObservationHistory::from_tracks(4, rng.gen_range(3..500), tracks)
}

fn map() -> GridMap {
    GridMap::open(30, 20).unwrap()
}

#[test]
fn constant_stub_matches_the_constant_baseline() {
    let mut p = open("constant");
    assert_eq!(p.hello().model, "stub-constant");
    assert_eq!(p.hello().history_len, 4);
    assert_eq!(p.name(), "external:stub-constant");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let agents: Vec<usize> = (0..rng.gen_range(1..6)).map(|i| i * 7 + rng.gen_range(0..3)).collect();
        let h = history(&mut rng, &agents);
        let horizon = rng.gen_range(1..12);
        assert_eq!(p.predict(&h, &map(), horizon).unwrap(), predict_constant(&h, horizon).unwrap());
    }
    let status = p.shutdown(Duration::from_secs(2)).expect("exits on shutdown");
    assert!(status.success());
}

#[test]
fn malformed_responses_are_schema_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = history(&mut rng, &[0, 1, 2]);
    for mode in ["short", "extra", "garbage"] {
        let mut p = open(mode);
        match p.predict(&h, &map(), 5) {
            Err(PredictionError::Schema(msg)) => assert!(!msg.is_empty()),
            other => panic!("{mode}: {other:?}"),
        }
    }
}

#[test]
fn response_parsing_checks_every_agent() {
    let ok = r#"{"type":"prediction","predictions":{"0":[[1.0,2.0],[1.5,2.0]],"4":[[0,0],[0,1]]}}"#;
    let b = parse_response(ok, 9, 2, [0, 4]).unwrap();
    assert_eq!(b.issued_at, 9);
    assert_eq!(b.points[&4][1].col, 1.0);
    for bad in [
        r#"{"type":"prediction","predictions":{"0":[[1.0,2.0]],"4":[[0,0],[0,1]]}}"#,
        r#"{"type":"prediction","predictions":{"0":[[1.0,2.0],[1.5,2.0]]}}"#,
        r#"{"type":"prediction","predictions":{"zero":[[1.0,2.0],[1.5,2.0]],"4":[[0,0],[0,1]]}}"#,
        r#"{"type":"prediction","predictions":{"0":[[1.0],[1.5,2.0]],"4":[[0,0],[0,1]]}}"#,
        r#"{"type":"error","message":"nope"}"#,
        r#"{"predictions":{}}"#,
        "[1, 2",
    ] {
        assert!(matches!(parse_response(bad, 9, 2, [0, 4]), Err(PredictionError::Schema(_))), "{bad}");
    }
}

#[test]
fn a_missed_deadline_is_reported_and_the_late_answer_discarded() {
    let mut p = open("slow-once");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let first = history(&mut rng, &[0, 1]);
    let started = Instant::now();
    assert_eq!(p.predict(&first, &map(), 3), Err(PredictionError::Deadline { ms: 1000 }));
    assert!(started.elapsed() < Duration::from_millis(1400));
    // The next answer must be for the next request, not the late one.
    let second = history(&mut rng, &[0, 1]);
    p.set_deadline(Duration::from_secs(5));
    assert_eq!(p.predict(&second, &map(), 6).unwrap(), predict_constant(&second, 6).unwrap());
}

#[test]
fn transport_failures_are_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = history(&mut rng, &[5]);
    let mut p = open("crash");
    assert!(matches!(p.predict(&h, &map(), 2), Err(PredictionError::Transport(_))));
    let missing = vec!["/nonexistent/predictor".to_string()];
    assert!(matches!(
        ExternalPredictor::spawn(&missing, Duration::from_secs(1), DEFAULT_STARTUP),
        Err(PredictionError::Transport(_))
    ));
    assert!(matches!(
        ExternalPredictor::spawn(&stub("no-hello"), Duration::from_secs(1), Duration::from_millis(500)),
        Err(PredictionError::Deadline { .. } | PredictionError::Schema(_))
    ));
}

fn suite(mode: &str) -> BTreeMap<&'static str, bool> {
    conformance_suite(&stub(mode), Duration::from_secs(1), Duration::from_secs(3)).into_iter().map(|c| (c.name, c.passed)).collect()
}

#[test]
fn conformance_suite_accepts_a_correct_server() {
    let report = suite("constant");
    let names: Vec<_> = report.keys().copied().collect();
    assert_eq!(names, ["agent-set", "handshake", "horizon-length", "malformed-request", "schema", "shutdown"]);
    assert!(report.values().all(|&p| p), "{report:?}");
}

#[test]
fn conformance_suite_pinpoints_each_defect() {
    let short = suite("short");
    assert!(!short["horizon-length"] && short["schema"] && short["agent-set"]);
    let extra = suite("extra");
    assert!(!extra["agent-set"] && extra["horizon-length"]);
    let garbage = suite("garbage");
    assert!(!garbage["schema"]);
    assert!(!suite("stubborn")["shutdown"]);
    let silent = suite("no-hello");
    assert_eq!(silent.len(), 1);
    assert!(!silent["handshake"]);
}
