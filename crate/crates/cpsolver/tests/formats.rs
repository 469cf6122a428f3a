use cpsolver::formats::{
    manifest_path, read_artifact, read_dataset, read_events, read_json, read_results, write_artifact, write_dataset,
    write_events, write_json, write_results, ResultRow, SolutionFile,
};
use cpsolver::mapio::{parse_map, to_json, to_movingai};
use cpsolver_core::conformal::CalibrationArtifact;
use cpsolver_core::cp_solver::BaselineKind;
use cpsolver_core::grid::{Coord, GridMap};
use cpsolver_core::mapf::NoClock;
use cpsolver_core::prediction::ConstantPredictor;
use cpsolver_core::sim::{generate_dataset, run_baseline, Scenario};
use cpsolver_core::warehouse::{warehouse, WarehouseSize};
use proptest::prelude::*;

fn arb_map() -> impl Strategy<Value = GridMap> {
    (1usize..=20, 1usize..=10).prop_flat_map(|(w, h)| {
        (prop::collection::vec(prop::bool::weighted(0.7), w * h), any::<prop::sample::Index>()).prop_filter_map(
            "needs a passable cell",
            move |(mask, pick)| {
                let cells: Vec<Coord> = (0..w * h).filter(|&i| mask[i]).map(|i| Coord::new(i / w, i % w)).collect();
                if cells.is_empty() {
                    return None;
                }
                let spots = vec![*pick.get(&cells)];
                GridMap::new("random", w, h, mask, Some(spots)).ok()
            },
        )
    })
}

proptest! {
    #[test]
    fn maps_survive_both_formats(map in arb_map()) {
        let back = parse_map(&to_json(&map), "ignored").unwrap();
        prop_assert_eq!(&back, &map);
        let plain = parse_map(&to_movingai(&map), "random").unwrap();
        prop_assert_eq!(plain.passable_mask(), map.passable_mask());
        prop_assert_eq!(plain.width(), map.width());
        prop_assert_eq!(plain.height(), map.height());
        prop_assert_eq!(plain.task_spots().len(), map.num_vertices());
    }
}

#[test]
fn datasets_round_trip_with_their_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let map = warehouse(WarehouseSize::Small);
    let data = generate_dataset(&map, 3, 20, 16, 5).unwrap();
    let path = dir.path().join("walkers.jsonl");
    write_dataset(&path, &data).unwrap();
    assert_eq!(manifest_path(&path), dir.path().join("walkers.manifest.json"));
    assert_eq!(read_dataset(&path).unwrap(), data);
    assert_eq!(read_dataset(&manifest_path(&path)).unwrap(), data);

    let text = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["traj_id"], 0);
    assert_eq!(first["positions"].as_array().unwrap().len(), 16);
    assert_eq!(first["positions"][0].as_array().unwrap().len(), 3);
    assert_eq!(first["positions"][0][0].as_array().unwrap().len(), 2);

    let truncated: String = text.lines().take(19).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, truncated).unwrap();
    assert!(read_dataset(&path).is_err());
}

#[test]
fn artifacts_write_infinite_radii_as_null() {
    let dir = tempfile::tempdir().unwrap();
    let art = CalibrationArtifact {
        delta: 0.05,
        horizon: 3,
        alphas: vec![1.0, 0.5, 0.25],
        radii: vec![1.5, 3.0, f64::INFINITY],
        cal2_size: 9,
        method: "quantile-fallback".into(),
        map: Some("warehouse-small".into()),
        predictor: None,
        uncontrolled: Some(5),
    };
    let path = dir.path().join("cal.json");
    write_artifact(&path, &art).unwrap();
    let raw: serde_json::Value = read_json(&path).unwrap();
    assert_eq!(raw["C"], serde_json::json!([1.5, 3.0, null]));
    assert_eq!(raw["H"], 3);
    assert_eq!(read_artifact(&path).unwrap(), art);

    let mut short = raw.clone();
    short["C"] = serde_json::json!([1.5]);
    write_json(&path, &short).unwrap();
    assert!(read_artifact(&path).is_err());
}

#[test]
fn event_logs_and_results_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = warehouse(WarehouseSize::Small);
    let sc = Scenario {
        n_controlled: 4,
        m_uncontrolled: 3,
        horizon: 5,
        conflict_horizon: 5,
        total_steps: 30,
        seed: 2,
        ..Scenario::default()
    };
    let out = run_baseline(BaselineKind::Ignore, &map, &sc, &mut ConstantPredictor, None, &NoClock).unwrap();
    let events = dir.path().join("events.jsonl");
    write_events(&events, &out.events).unwrap();
    assert_eq!(read_events(&events).unwrap(), out.events);

    let row = ResultRow::from_metrics("warehouse-small", "IGNORE", 4, 3, 0.05, 5, 5, 2, &out.metrics);
    let mut cp = row.clone();
    cp.kind = "CP".into();
    cp.coverage = Some(0.9);
    let csv = dir.path().join("results.csv");
    write_results(&csv, &[row.clone(), cp.clone()]).unwrap();
    assert_eq!(read_results(&csv).unwrap(), vec![row, cp]);
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_owned();
    assert_eq!(
        header,
        "map,kind,n_controlled,m_uncontrolled,delta,H,w_hat,seed,throughput,collisions,violations,runtime_s,coverage"
    );
}

#[test]
fn solution_files_key_paths_by_agent() {
    let file = SolutionFile {
        paths: [(0, vec![Coord::new(1, 2), Coord::new(1, 3)]), (1, vec![Coord::new(0, 0)])].into(),
        cost: 1,
        expanded: 4,
        runtime_s: 0.0,
        w_final: 1.5,
    };
    let v = serde_json::to_value(&file).unwrap();
    assert_eq!(v["paths"]["0"], serde_json::json!([[1, 2], [1, 3]]));
    assert_eq!(serde_json::from_value::<SolutionFile>(v).unwrap(), file);
}
