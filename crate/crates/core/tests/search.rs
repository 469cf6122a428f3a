use cpsolver_core::grid::{Coord, DistanceCache, GridMap};
use cpsolver_core::mapf::{
    detect_first_conflict, low_level_search, solve, AgentTask, BeyondHorizon, Constraint, DynamicObstacleSet, Instance,
    LowLevelError, LowLevelQuery, NoClock, Solution, SolveError, SolverConfig, SolverMode,
};
use cpsolver_core::reference::{joint_optimal_cost, min_single_agent_cost, random_grid_instance, JointSearch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn solve_mode(map: &GridMap, tasks: &[AgentTask], mode: SolverMode) -> Result<Solution, SolveError> {
    let obstacles = DynamicObstacleSet::empty(0);
    let instance = Instance {
        map,
        agents: tasks,
        t0: 0,
        obstacles: &obstacles,
        predictions: &[],
    };
    solve(&instance, &SolverConfig::new(mode), &NoClock, &mut DistanceCache::default())
}

fn assert_valid(map: &GridMap, tasks: &[AgentTask], sol: &Solution) {
    let obstacles = DynamicObstacleSet::empty(0);
    assert!(detect_first_conflict(&sol.paths, &[], &obstacles, None).is_none());
    for (task, path) in tasks.iter().zip(&sol.paths) {
        assert_eq!(path.first(), task.start);
        assert_eq!(path.last(), task.final_goal());
        assert!(path.is_contiguous());
        assert!(path.vertices.iter().all(|v| map.is_passable(*v)));
    }
    assert_eq!(sol.cost, sol.paths.iter().map(|p| p.cost()).sum::<usize>());
}

#[test]
fn cbs_matches_joint_space_oracle_and_ecbs_stays_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 30 {
        let n = rng.gen_range(2..=4);
        let (map, tasks) = random_grid_instance(&mut rng, 8, 0.2, n);
        let starts: Vec<Coord> = tasks.iter().map(|t| t.start).collect();
        let goals: Vec<Coord> = tasks.iter().map(|t| t.final_goal()).collect();
        let oracle = joint_optimal_cost(&map, &starts, &goals, 3_000_000);
        let cbs = solve_mode(&map, &tasks, SolverMode::CbsOptimal);
        match oracle {
            JointSearch::LimitReached => continue,
            JointSearch::Infeasible => {
                assert!(cbs.is_err());
                continue;
            }
            JointSearch::Optimal(opt) => {
                let cbs = cbs.expect("oracle found a plan");
                assert_valid(&map, &tasks, &cbs);
                assert_eq!(cbs.cost, opt);
                let ecbs = solve_mode(&map, &tasks, SolverMode::Ecbs { w: 1.5 }).unwrap();
                assert_valid(&map, &tasks, &ecbs);
                assert!(ecbs.cost as f64 <= 1.5 * opt as f64, "{} > 1.5 * {opt}", ecbs.cost);
                assert!(ecbs.stats.lower_bound <= opt);
            }
        }
        checked += 1;
    }
}

#[test]
fn ecbs_bound_holds_for_larger_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..15 {
        let (map, tasks) = random_grid_instance(&mut rng, 8, 0.15, 4);
        let Ok(opt) = solve_mode(&map, &tasks, SolverMode::CbsOptimal) else {
            continue;
        };
        for w in [1.0, 1.2, 2.0, 3.0] {
            let sol = solve_mode(&map, &tasks, SolverMode::Ecbs { w }).unwrap();
            assert_valid(&map, &tasks, &sol);
            assert!(sol.cost as f64 <= w * opt.cost as f64 + 1e-9);
        }
    }
}

fn arb_constraints(size: usize) -> impl Strategy<Value = Vec<Constraint>> {
    let coord = (0..size, 0..size).prop_map(|(r, c)| Coord::new(r, c));
    let vertex = (coord.clone(), 1usize..12).prop_map(|(v, t)| Constraint::vertex(0, v, t));
    let edge = (coord, 0usize..4, 1usize..12).prop_filter_map("edge inside grid", move |(u, d, t)| {
        let (dr, dc): (isize, isize) = [(0, 1), (1, 0), (0, -1), (-1, 0)][d];
        let r = u.row.checked_add_signed(dr)?;
        let c = u.col.checked_add_signed(dc)?;
        (r < size && c < size).then(|| Constraint::edge(0, u, Coord::new(r, c), t))
    });
    prop::collection::vec(prop_oneof![vertex, edge], 0..14)
}

fn arb_map(size: usize) -> impl Strategy<Value = GridMap> {
    prop::collection::vec(prop::bool::weighted(0.8), size * size)
        .prop_filter_map("connected", move |mask| {
            GridMap::new("p", size, size, mask, None).ok().filter(|m| m.is_connected() && m.num_vertices() >= 2)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn low_level_is_optimal_against_time_expanded_search(
        map in arb_map(5),
        constraints in arb_constraints(5),
        picks in (0usize..100, 0usize..100, 0usize..100),
        obstacle_cells in prop::collection::vec((0usize..5, 0usize..5), 0..4),
        persist in any::<bool>(),
    ) {
        let cells: Vec<Coord> = map.passable_cells().collect();
        let start = cells[picks.0 % cells.len()];
        let goals = vec![cells[picks.1 % cells.len()], cells[picks.2 % cells.len()]];
        let steps: Vec<Vec<Coord>> = (0..3)
            .map(|h| {
                let mut s: Vec<Coord> = obstacle_cells
                    .iter()
                    .skip(h % 2)
                    .map(|&(r, c)| Coord::new(r, c))
                    .filter(|c| map.is_passable(*c) && *c != start)
                    .collect();
                s.sort();
                s.dedup();
                s
            })
            .collect();
        let beyond = if persist { BeyondHorizon::Persist } else { BeyondHorizon::Drop };
        let obstacles = DynamicObstacleSet::new(0, vec![], steps, beyond);
        let max_t = 4 * map.num_vertices();
        let expected = min_single_agent_cost(&map, 0, start, &goals, 0, &constraints, &obstacles, &[], max_t);
        let query = LowLevelQuery {
            agent: 0,
            start,
            goals: &goals,
            t0: 0,
            constraints: &constraints,
            forbidden: &[],
            w: 1.0,
            horizon: None,
            max_timesteps: Some(max_t),
        };
        let got = low_level_search(&map, &mut DistanceCache::default(), &query, &obstacles, &[], &[]);
        match (expected, got) {
            (Some(cost), Ok(res)) => {
                prop_assert_eq!(res.cost, cost);
                prop_assert!(res.lower_bound <= cost);
                for c in &constraints {
                    prop_assert!(!c.violated_by(&res.path), "violates {:?}", c);
                }
                // Past its last vertex the path holds the goal; check that too.
                for t in 1..=res.path.end_time() + obstacles.last_change() + 2 {
                    let (u, v) = (res.path.at(t - 1), res.path.at(t));
                    prop_assert!(!obstacles.blocks_vertex(v, t));
                    prop_assert!(u == v || !obstacles.blocks_move(u, v, t));
                }
            }
            (None, Err(LowLevelError::SearchExhausted { .. } | LowLevelError::Unreachable { .. })) => {}
            (e, g) => prop_assert!(false, "oracle {:?} vs search {:?}", e, g),
        }
    }
}
