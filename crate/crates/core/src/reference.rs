//! Brute-force reference implementations. They are slow and written for
//! obviousness, and exist so the fast paths can be cross-checked.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::vec::Vec;
use core::cmp::Reverse;

use hashbrown::HashMap;

use crate::grid::{Coord, GridMap};
use crate::mapf::{AgentId, AgentTask, Constraint, ConstraintKind, DynamicObstacleSet};
use crate::prediction::{Point, PredictionBundle};

/// Hop distances from `src` by plain breadth-first search; `None` marks
/// unreachable or blocked cells.
pub fn bfs(map: &GridMap, src: Coord) -> Vec<Option<usize>> {
    let mut dist = alloc::vec![None; map.num_cells()];
    if !map.is_passable(src) {
        return dist;
    }
    dist[map.index(src)] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[map.index(u)].expect("queued cells have a distance");
        for v in map.neighbors(u).expect("passable") {
            if dist[map.index(v)].is_none() {
                dist[map.index(v)] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointSearch {
    Optimal(usize),
    Infeasible,
    LimitReached,
}

/// Minimum sum of arrival times for agents moving jointly, found by A* over
/// joint positions. An agent is "finished" once it commits to staying on its
/// goal forever; each joint step costs one per unfinished agent. Vertex
/// collisions and swaps are forbidden.
pub fn joint_optimal_cost(map: &GridMap, starts: &[Coord], goals: &[Coord], node_limit: usize) -> JointSearch {
    let n = starts.len();
    assert!(n == goals.len() && n <= 8);
    let fields: Vec<Vec<Option<usize>>> = goals.iter().map(|&g| bfs(map, g)).collect();
    let h = |pos: &[Coord], done: u8| -> Option<usize> {
        let mut sum = 0;
        for i in 0..n {
            if done & (1 << i) == 0 {
                sum += fields[i][map.index(pos[i])]?;
            }
        }
        Some(sum)
    };
    type State = (Vec<Coord>, u8);
    let full = ((1u16 << n) - 1) as u8;
    let start: State = (starts.to_vec(), 0);
    let mut best: HashMap<State, usize> = HashMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(start.clone(), 0);
    let Some(h0) = h(starts, 0) else {
        return JointSearch::Infeasible;
    };
    heap.push(Reverse((h0, Reverse(0usize), start)));
    let mut expanded = 0;
    while let Some(Reverse((_, Reverse(g), state))) = heap.pop() {
        if best.get(&state).is_some_and(|&b| b < g) {
            continue;
        }
        let (pos, done) = &state;
        if *done == full {
            return JointSearch::Optimal(g);
        }
        expanded += 1;
        if expanded > node_limit {
            return JointSearch::LimitReached;
        }
        let mut push = |next: State, cost: usize| {
            if let Some(hv) = h(&next.0, next.1) {
                if best.get(&next).is_none_or(|&b| cost < b) {
                    best.insert(next.clone(), cost);
                    heap.push(Reverse((cost + hv, Reverse(cost), next)));
                }
            }
        };
        // Committing to the goal is free.
        for i in 0..n {
            if done & (1 << i) == 0 && pos[i] == goals[i] {
                push((pos.clone(), done | (1 << i)), g);
            }
        }
        let unfinished = (0..n).filter(|i| done & (1 << i) == 0).count();
        let options: Vec<Vec<Coord>> = (0..n)
            .map(|i| {
                if done & (1 << i) != 0 {
                    alloc::vec![pos[i]]
                } else {
                    let mut o = alloc::vec![pos[i]];
                    o.extend(map.neighbors(pos[i]).expect("passable").into_iter().filter(|v| *v != pos[i]));
                    o
                }
            })
            .collect();
        let mut choice = alloc::vec![0usize; n];
        'moves: loop {
            let next: Vec<Coord> = (0..n).map(|i| options[i][choice[i]]).collect();
            let ok = (0..n).all(|a| {
                (a + 1..n).all(|b| next[a] != next[b] && !(next[a] == pos[b] && next[b] == pos[a]))
            });
            if ok {
                push((next, *done), g + unfinished);
            }
            for i in 0..n {
                choice[i] += 1;
                if choice[i] < options[i].len() {
                    continue 'moves;
                }
                choice[i] = 0;
            }
            break;
        }
    }
    JointSearch::Infeasible
}

/// Cheapest single-agent arrival time (relative to `t0`) visiting `goals` in
/// order and then holding the last one forever, by exhaustive search of the
/// time-expanded graph up to `t0 + max_t`. Honors vertex/edge constraints
/// for `agent`, the obstacle set (vertices and the swap rule) and
/// `forbidden` vertices.
pub fn min_single_agent_cost(
    map: &GridMap,
    agent: AgentId,
    start: Coord,
    goals: &[Coord],
    t0: usize,
    constraints: &[Constraint],
    obstacles: &DynamicObstacleSet,
    forbidden: &[Coord],
    max_t: usize,
) -> Option<usize> {
    let mine: Vec<&Constraint> = constraints.iter().filter(|c| c.agent == agent).collect();
    let vertex_ok = |v: Coord, t: usize| {
        !forbidden.contains(&v)
            && !obstacles.blocks_vertex(v, t)
            && !mine
                .iter()
                .any(|c| c.timestep == t && c.kind == ConstraintKind::Vertex(v))
    };
    let move_ok = |u: Coord, v: Coord, t: usize| {
        (u == v || !obstacles.blocks_move(u, v, t))
            && !mine
                .iter()
                .any(|c| c.timestep == t && c.kind == ConstraintKind::Edge(u, v))
    };
    let last_goal = *goals.last()?;
    let latest_block = mine
        .iter()
        .filter(|c| c.kind == ConstraintKind::Vertex(last_goal))
        .map(|c| c.timestep)
        .max();
    let holdable = |t: usize| {
        latest_block.is_none_or(|b| b <= t) && obstacles.last_block_time(last_goal).is_none_or(|b| b <= t)
    };
    let advance = |k: usize, v: Coord| {
        let mut k = k;
        while k < goals.len() - 1 && goals[k] == v {
            k += 1;
        }
        k
    };
    if forbidden.contains(&start) {
        return None;
    }
    let mut layer = BTreeSet::from([(start, advance(0, start))]);
    for t in t0..=t0 + max_t {
        for &(v, k) in &layer {
            if k == goals.len() - 1 && v == last_goal && holdable(t) {
                return Some(t - t0);
            }
        }
        let mut next = BTreeSet::new();
        for &(u, k) in &layer {
            let mut opts = alloc::vec![u];
            opts.extend(map.neighbors(u).expect("passable").into_iter().filter(|v| *v != u));
            for v in opts {
                if vertex_ok(v, t + 1) && move_ok(u, v, t + 1) {
                    next.insert((v, advance(k, v)));
                }
            }
        }
        layer = next;
    }
    None
}

/// Interval vertex sets by checking every passable vertex against both
/// membership conditions for every agent.
pub fn discretize_brute(
    radii: &[f64],
    bundle: &PredictionBundle,
    current: &BTreeMap<AgentId, Coord>,
    map: &GridMap,
) -> Vec<Vec<Coord>> {
    let dists: BTreeMap<AgentId, Vec<Option<usize>>> = current.iter().map(|(&b, &c)| (b, bfs(map, c))).collect();
    (1..=radii.len())
        .map(|h| {
            map.passable_cells()
                .filter(|&v| {
                    bundle.points.iter().any(|(b, pts)| {
                        let hops = dists[b][map.index(v)];
                        hops.is_some_and(|d| d <= h) && pts[h - 1].distance(Point::from(v)) <= radii[h - 1]
                    })
                })
                .collect()
        })
        .collect()
}

/// `ceil((n + 1) * (1 - num/den))` in exact integer arithmetic.
pub fn exact_rank(n: usize, delta_num: usize, delta_den: usize) -> usize {
    assert!(delta_num < delta_den);
    ((n + 1) * (delta_den - delta_num)).div_ceil(delta_den)
}

/// Split-conformal quantile: the `exact_rank`-th smallest score, or infinity
/// when that rank exceeds the number of scores.
pub fn split_conformal_quantile(scores: &[f64], delta_num: usize, delta_den: usize) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = exact_rank(sorted.len(), delta_num, delta_den);
    if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

/// Random connected `size`×`size` grid with roughly `density` blocked cells
/// and `n_agents` tasks with distinct starts and distinct goals.
pub fn random_grid_instance<R: rand::Rng>(
    rng: &mut R,
    size: usize,
    density: f64,
    n_agents: usize,
) -> (GridMap, Vec<AgentTask>) {
    use rand::seq::SliceRandom;
    loop {
        let mask: Vec<bool> = (0..size * size).map(|_| !rng.gen_bool(density)).collect();
        let Ok(map) = GridMap::new("random", size, size, mask, None) else {
            continue;
        };
        if !map.is_connected() || map.num_vertices() < 2 * n_agents {
            continue;
        }
        let cells: Vec<Coord> = map.passable_cells().collect();
        let starts: Vec<Coord> = cells.choose_multiple(rng, n_agents).copied().collect();
        let goals: Vec<Coord> = cells.choose_multiple(rng, n_agents).copied().collect();
        let tasks = (0..n_agents).map(|i| AgentTask::new(i, starts[i], goals[i])).collect();
        return (map, tasks);
    }
}
