//! Focal A* over (vertex, timestep, goal index) states.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Reverse;

use hashbrown::{HashMap, HashSet};

use super::conflict::predicted_at;
use super::{AgentId, Constraint, ConstraintKind, DynamicObstacleSet, Path};
use crate::grid::{Coord, DistanceCache, DistanceField, GridError, GridMap, UNREACHABLE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LowLevelError {
    #[error("agent {agent}: a goal is not connected to its start")]
    Unreachable { agent: AgentId },
    #[error("agent {agent}: no path satisfies the constraints within the timestep cap")]
    SearchExhausted { agent: AgentId },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Single-agent request. `goals` are visited in order; the agent holds the
/// last one. Only constraints addressed to `agent` are used.
#[derive(Debug, Clone)]
pub struct LowLevelQuery<'a> {
    pub agent: AgentId,
    pub start: Coord,
    pub goals: &'a [Coord],
    pub t0: usize,
    pub constraints: &'a [Constraint],
    /// Vertices this agent may never enter (other agents' reserved goals).
    pub forbidden: &'a [Coord],
    /// Focal suboptimality factor, >= 1.
    pub w: f64,
    /// Conflict horizon: constraints and obstacles are enforced up to and
    /// including `t0 + horizon`; the rest is shortest-path completion.
    pub horizon: Option<usize>,
    /// Search gives up past `t0 + max_timesteps` (default 4|V|).
    pub max_timesteps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowLevelResult {
    pub path: Path,
    /// Arrival time at the final goal relative to `t0`.
    pub cost: usize,
    /// Minimum f-value in OPEN when the path was selected; a lower bound on
    /// the optimal cost under the same constraints.
    pub lower_bound: usize,
    pub expanded: usize,
}

/// Positions of the other controlled agents, for the focal conflict count.
pub(crate) struct Occupancy {
    at: HashMap<(u32, u32), u16>,
    moves: HashMap<(u32, u32, u32), u16>,
    parked: Vec<(u32, u32)>,
    end: usize,
}

impl Occupancy {
    pub(crate) fn new(map: &GridMap, paths: &[&Path]) -> Self {
        let mut at = HashMap::new();
        let mut moves = HashMap::new();
        let mut parked = Vec::new();
        let mut end = 0;
        for p in paths {
            for (i, &v) in p.vertices.iter().enumerate() {
                let t = (p.t0 + i) as u32;
                let vi = map.index(v) as u32;
                *at.entry((vi, t)).or_insert(0) += 1;
                if i > 0 {
                    let ui = map.index(p.vertices[i - 1]) as u32;
                    if ui != vi {
                        *moves.entry((ui, vi, t)).or_insert(0) += 1;
                    }
                }
            }
            parked.push((map.index(p.last()) as u32, p.end_time() as u32));
            end = end.max(p.end_time());
        }
        Self { at, moves, parked, end }
    }

    fn count(&self, from: u32, to: u32, t: u32) -> u32 {
        let mut n = self.at.get(&(to, t)).copied().unwrap_or(0) as u32;
        n += self
            .parked
            .iter()
            .filter(|&&(v, end)| v == to && t > end)
            .count() as u32;
        if from != to {
            n += self.moves.get(&(to, from, t)).copied().unwrap_or(0) as u32;
        }
        n
    }
}

#[derive(Clone, Copy)]
struct Node {
    vertex: u32,
    t: u32,
    k: u16,
    g: u32,
    f: u32,
    conflicts: u32,
    parent: u32,
    terminal: bool,
    stale: bool,
}

type OpenKey = (u32, Reverse<u32>, u32, u32, u32);
type FocalKey = (u32, u32, Reverse<u32>, u32, u32, u32);

fn open_key(n: &Node, id: u32) -> OpenKey {
    (n.f, Reverse(n.g), n.vertex, n.t, id)
}

fn focal_key(n: &Node, id: u32) -> FocalKey {
    (n.conflicts, n.f, Reverse(n.g), n.vertex, n.t, id)
}

fn focal_bound(w: f64, f_min: u32) -> u32 {
    libm::floor(w * f_min as f64 + 1e-9) as u32
}

/// Focal search for one agent. Hard-avoids its constraints, the obstacle
/// set, the predicted paths (vertices and swaps) and its forbidden vertices
/// within the enforced horizon; among paths with cost <= w * f_min it
/// minimizes conflicts with `other_paths`.
pub fn low_level_search(
    map: &GridMap,
    cache: &mut DistanceCache,
    query: &LowLevelQuery<'_>,
    obstacles: &DynamicObstacleSet,
    predictions: &[Path],
    other_paths: &[Path],
) -> Result<LowLevelResult, LowLevelError> {
    let others: Vec<&Path> = other_paths
        .iter()
        .filter(|p| p.agent != query.agent)
        .collect();
    let occupancy = Occupancy::new(map, &others);
    search(map, cache, query, obstacles, predictions, &occupancy)
}

pub(crate) fn search(
    map: &GridMap,
    cache: &mut DistanceCache,
    q: &LowLevelQuery<'_>,
    obstacles: &DynamicObstacleSet,
    predictions: &[Path],
    occupancy: &Occupancy,
) -> Result<LowLevelResult, LowLevelError> {
    let agent = q.agent;
    assert!(q.w >= 1.0, "suboptimality factor must be >= 1");
    if !map.is_passable(q.start) {
        return Err(GridError::NotPassable(q.start).into());
    }
    let mut goals: Vec<Coord> = Vec::with_capacity(q.goals.len());
    for &g in q.goals {
        if goals.last() != Some(&g) {
            goals.push(g);
        }
    }
    assert!(!goals.is_empty(), "low-level query needs a goal");
    let fields: Vec<Arc<DistanceField>> = goals
        .iter()
        .map(|&g| cache.get(map, g))
        .collect::<Result<_, _>>()?;
    // suffix[k]: remaining hops from goals[k] through the rest of the sequence
    let mut suffix = alloc::vec![0u32; goals.len()];
    for k in (0..goals.len() - 1).rev() {
        let d = fields[k + 1].get(goals[k]).ok_or(LowLevelError::Unreachable { agent })?;
        suffix[k] = suffix[k + 1] + d;
    }
    let last = goals.len() - 1;
    let heuristic = |v: usize, k: usize| -> u32 {
        let d = fields[k].at(v);
        if d == UNREACHABLE {
            UNREACHABLE
        } else {
            d + suffix[k]
        }
    };

    let t0 = q.t0;
    let enforce_end = q.horizon.map(|h| t0 + h);
    let enforced = |t: usize| enforce_end.is_none_or(|e| t <= e);
    let cap_t = t0 + q.max_timesteps.unwrap_or(4 * map.num_vertices());

    let mut vertex_cons: HashSet<(usize, usize)> = HashSet::new();
    let mut edge_cons: HashSet<(usize, usize, usize)> = HashSet::new();
    let mut last_constraint = t0;
    for c in q.constraints.iter().filter(|c| c.agent == agent) {
        match c.kind {
            ConstraintKind::Vertex(v) => {
                vertex_cons.insert((map.index(v), c.timestep));
            }
            ConstraintKind::Edge(a, b) => {
                edge_cons.insert((map.index(a), map.index(b), c.timestep));
            }
        }
        last_constraint = last_constraint.max(c.timestep);
    }
    let mut forbidden = alloc::vec![false; map.num_cells()];
    for &v in q.forbidden {
        if map.in_bounds(v) {
            forbidden[map.index(v)] = true;
        }
    }

    // After this timestep nothing time-dependent remains, so states collapse
    // onto it.
    let mut t_static = last_constraint.max(occupancy.end + 1);
    if !obstacles.is_empty() {
        t_static = t_static.max(obstacles.last_change());
    }
    for p in predictions {
        t_static = t_static.max(p.end_time() + 1);
    }
    if let Some(e) = enforce_end {
        t_static = t_static.min(e);
    }
    t_static = t_static.max(t0);

    // Earliest time from which the final goal can be held.
    let g_final = goals[last];
    let gf_idx = map.index(g_final);
    let mut hold_after = t0;
    let mut forever = forbidden[gf_idx] || obstacles.blocks_forever_from(g_final, t0);
    if let Some(t) = obstacles.last_block_time(g_final) {
        hold_after = hold_after.max(t);
    }
    for &(v, t) in &vertex_cons {
        if v == gf_idx {
            hold_after = hold_after.max(t);
        }
    }
    for p in predictions {
        let beyond_hit = obstacles.beyond == super::BeyondHorizon::Persist && p.last() == g_final;
        forever |= beyond_hit;
        for (i, &v) in p.vertices.iter().enumerate() {
            if v == g_final {
                hold_after = hold_after.max(p.t0 + i);
            }
        }
    }
    match enforce_end {
        Some(e) => {
            if forever {
                hold_after = e;
            }
            hold_after = hold_after.min(e);
        }
        None if forever => return Err(LowLevelError::SearchExhausted { agent }),
        None => {}
    }

    let vertex_blocked = |v: usize, c: Coord, t: usize| -> bool {
        forbidden[v]
            || vertex_cons.contains(&(v, t))
            || obstacles.blocks_vertex(c, t)
            || predictions
                .iter()
                .any(|p| predicted_at(p, t, obstacles.beyond) == Some(c))
    };
    let move_blocked = |u: usize, v: usize, cu: Coord, cv: Coord, t: usize| -> bool {
        if u == v {
            return false;
        }
        edge_cons.contains(&(u, v, t))
            || obstacles.blocks_move(cu, cv, t)
            || predictions.iter().any(|p| {
                predicted_at(p, t - 1, obstacles.beyond) == Some(cv)
                    && predicted_at(p, t, obstacles.beyond) == Some(cu)
            })
    };

    let start_idx = map.index(q.start);
    let mut k0 = 0usize;
    while k0 < last && goals[k0] == q.start {
        k0 += 1;
    }
    let h0 = heuristic(start_idx, k0);
    if h0 == UNREACHABLE {
        return Err(LowLevelError::Unreachable { agent });
    }

    let mut nodes: Vec<Node> = Vec::new();
    let mut open: BTreeSet<OpenKey> = BTreeSet::new();
    let mut focal: BTreeSet<FocalKey> = BTreeSet::new();
    let mut best: HashMap<(u32, u32, u16), (u32, u32, u32)> = HashMap::new();

    let is_terminal = |v: usize, t: usize, k: usize| -> bool {
        enforce_end.is_some_and(|e| t >= e) || (k == last && v == gf_idx && t >= hold_after)
    };
    let root = Node {
        vertex: start_idx as u32,
        t: t0 as u32,
        k: k0 as u16,
        g: 0,
        f: h0,
        conflicts: 0,
        parent: u32::MAX,
        terminal: is_terminal(start_idx, t0, k0),
        stale: false,
    };
    nodes.push(root);
    open.insert(open_key(&root, 0));
    focal.insert(focal_key(&root, 0));
    best.insert((root.vertex, root.t, root.k), (0, 0, 0));
    let mut f_min = root.f;
    let mut bound = focal_bound(q.w, f_min);
    let mut expanded = 0usize;

    loop {
        let Some(&(head_f, ..)) = open.first() else {
            return Err(LowLevelError::SearchExhausted { agent });
        };
        if head_f > f_min {
            let new_bound = focal_bound(q.w, head_f);
            if new_bound > bound {
                let lo: OpenKey = (bound + 1, Reverse(u32::MAX), 0, 0, 0);
                for key in open.range(lo..) {
                    if key.0 > new_bound {
                        break;
                    }
                    let id = key.4;
                    focal.insert(focal_key(&nodes[id as usize], id));
                }
                bound = new_bound;
            }
            f_min = head_f;
        }
        let fk = focal.pop_first().expect("focal holds every open node within the bound");
        let id = fk.5;
        let node = nodes[id as usize];
        open.remove(&open_key(&node, id));
        if node.terminal {
            return Ok(reconstruct(map, &nodes, id, &goals, &fields, agent, t0, f_min as usize, expanded));
        }
        expanded += 1;
        let t = node.t as usize;
        let t_next = t + 1;
        if t_next > cap_t {
            continue;
        }
        let u = node.vertex as usize;
        let cu = map.coord(u);
        let check = enforced(t_next);
        for v in map.neighbor_indices(u) {
            let cv = map.coord(v);
            if check && (vertex_blocked(v, cv, t_next) || move_blocked(u, v, cu, cv, t_next)) {
                continue;
            }
            let mut k = node.k as usize;
            if k < last && v == map.index(goals[k]) {
                k += 1;
            }
            let h = heuristic(v, k);
            if h == UNREACHABLE {
                continue;
            }
            let g = node.g + 1;
            let child = Node {
                vertex: v as u32,
                t: t_next as u32,
                k: k as u16,
                g,
                f: g + h,
                conflicts: node.conflicts + occupancy.count(u as u32, v as u32, t_next as u32),
                parent: id,
                terminal: is_terminal(v, t_next, k),
                stale: false,
            };
            let key = (child.vertex, t_next.min(t_static) as u32, child.k);
            let child_id = nodes.len() as u32;
            if let Some(&(bg, bc, bid)) = best.get(&key) {
                if bg < g || (bg == g && bc <= child.conflicts) {
                    continue;
                }
                let old = nodes[bid as usize];
                if !old.stale && open.remove(&open_key(&old, bid)) {
                    focal.remove(&focal_key(&old, bid));
                }
                nodes[bid as usize].stale = true;
            }
            best.insert(key, (g, child.conflicts, child_id));
            nodes.push(child);
            open.insert(open_key(&child, child_id));
            if child.f <= bound {
                focal.insert(focal_key(&child, child_id));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    map: &GridMap,
    nodes: &[Node],
    id: u32,
    goals: &[Coord],
    fields: &[Arc<DistanceField>],
    agent: AgentId,
    t0: usize,
    lower_bound: usize,
    expanded: usize,
) -> LowLevelResult {
    let mut rev = Vec::new();
    let mut cur = id;
    while cur != u32::MAX {
        rev.push(nodes[cur as usize].vertex as usize);
        cur = nodes[cur as usize].parent;
    }
    rev.reverse();
    let end = nodes[id as usize];
    let mut vertices: Vec<Coord> = rev.into_iter().map(|i| map.coord(i)).collect();
    // Unconstrained completion through the remaining goals.
    let mut pos = end.vertex as usize;
    for k in end.k as usize..goals.len() {
        let field = &fields[k];
        while field.at(pos) != 0 {
            let d = field.at(pos);
            pos = map
                .neighbor_indices(pos)
                .find(|&n| field.at(n) + 1 == d)
                .expect("descending neighbor exists");
            vertices.push(map.coord(pos));
        }
    }
    let path = Path::new(agent, t0, vertices);
    LowLevelResult {
        cost: path.vertices.len() - 1,
        path,
        lower_bound,
        expanded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapf::BeyondHorizon;
    use alloc::vec;

    fn query<'a>(start: Coord, goals: &'a [Coord], constraints: &'a [Constraint]) -> LowLevelQuery<'a> {
        LowLevelQuery {
            agent: 0,
            start,
            goals,
            t0: 0,
            constraints,
            forbidden: &[],
            w: 1.0,
            horizon: None,
            max_timesteps: None,
        }
    }

    fn run(map: &GridMap, q: &LowLevelQuery<'_>, obs: &DynamicObstacleSet, preds: &[Path]) -> Result<LowLevelResult, LowLevelError> {
        low_level_search(map, &mut DistanceCache::default(), q, obs, preds, &[])
    }

    #[test]
    fn open_grid_cost_is_manhattan() {
        let m = GridMap::open(6, 5).unwrap();
        let goals = [Coord::new(4, 5)];
        let r = run(&m, &query(Coord::new(0, 0), &goals, &[]), &DynamicObstacleSet::empty(0), &[]).unwrap();
        assert_eq!(r.cost, 9);
        assert_eq!(r.lower_bound, 9);
        assert!(r.path.is_contiguous());
        assert_eq!(r.path.last(), goals[0]);
    }

    #[test]
    fn goal_constraint_forces_later_arrival() {
        let m = GridMap::open(3, 1).unwrap();
        let goals = [Coord::new(0, 2)];
        let cons = [Constraint::vertex(0, Coord::new(0, 2), 4)];
        let r = run(&m, &query(Coord::new(0, 0), &goals, &cons), &DynamicObstacleSet::empty(0), &[]).unwrap();
        assert_eq!(r.cost, 5);
        assert!(!cons[0].violated_by(&r.path));
    }

    #[test]
    fn obstacles_and_predictions_are_avoided() {
        let m = GridMap::open(3, 3).unwrap();
        let goals = [Coord::new(1, 2)];
        let obs = DynamicObstacleSet::new(0, vec![], vec![vec![Coord::new(1, 1)], vec![Coord::new(1, 1)]], BeyondHorizon::Drop);
        let r = run(&m, &query(Coord::new(1, 0), &goals, &[]), &obs, &[]).unwrap();
        for t in 1..=2 {
            assert_ne!(r.path.at(t), Coord::new(1, 1));
        }
        assert_eq!(r.cost, 4);
        let pred = Path::new(9, 0, vec![Coord::new(0, 1), Coord::new(1, 1), Coord::new(1, 1)]);
        let r = run(&m, &query(Coord::new(1, 0), &goals, &[]), &DynamicObstacleSet::empty(0), core::slice::from_ref(&pred)).unwrap();
        for t in 1..=r.path.end_time() {
            assert_ne!(r.path.at(t), pred.at(t));
        }
    }

    #[test]
    fn permanently_blocked_goal_fails_fast() {
        let m = GridMap::open(3, 3).unwrap();
        let goals = [Coord::new(2, 2)];
        let obs = DynamicObstacleSet::new(0, vec![], vec![vec![Coord::new(2, 2)]], BeyondHorizon::Persist);
        let err = run(&m, &query(Coord::new(0, 0), &goals, &[]), &obs, &[]).unwrap_err();
        assert_eq!(err, LowLevelError::SearchExhausted { agent: 0 });
        // with a conflict horizon the agent only has to survive until it
        let mut q = query(Coord::new(0, 0), &goals, &[]);
        q.horizon = Some(3);
        let r = run(&m, &q, &obs, &[]).unwrap();
        assert_eq!(r.path.last(), Coord::new(2, 2));
    }

    #[test]
    fn unreachable_goal_reported() {
        let mask = vec![true, false, true];
        let m = GridMap::new("split", 3, 1, mask, None).unwrap();
        let goals = [Coord::new(0, 2)];
        let err = run(&m, &query(Coord::new(0, 0), &goals, &[]), &DynamicObstacleSet::empty(0), &[]).unwrap_err();
        assert_eq!(err, LowLevelError::Unreachable { agent: 0 });
    }

    #[test]
    fn goal_sequence_is_visited_in_order() {
        let m = GridMap::open(10, 1).unwrap();
        let goals = [Coord::new(0, 9), Coord::new(0, 0)];
        let r = run(&m, &query(Coord::new(0, 0), &goals, &[]), &DynamicObstacleSet::empty(0), &[]).unwrap();
        assert_eq!(r.cost, 18);
        assert_eq!(r.path.at(9), Coord::new(0, 9));
    }

    #[test]
    fn horizon_completion_ignores_late_constraints() {
        let m = GridMap::open(5, 1).unwrap();
        let goals = [Coord::new(0, 4)];
        let cons = [Constraint::vertex(0, Coord::new(0, 3), 3)];
        let mut q = query(Coord::new(0, 0), &goals, &cons);
        q.horizon = Some(2);
        let r = run(&m, &q, &DynamicObstacleSet::empty(0), &[]).unwrap();
        assert_eq!(r.cost, 4);
        q.horizon = None;
        let r = run(&m, &q, &DynamicObstacleSet::empty(0), &[]).unwrap();
        assert_eq!(r.cost, 5);
    }

    #[test]
    fn focal_prefers_fewer_conflicts_within_bound() {
        let m = GridMap::open(3, 3).unwrap();
        let goals = [Coord::new(2, 2)];
        // another agent parked in the middle
        let other = Path::new(1, 0, vec![Coord::new(1, 1)]);
        let mut q = query(Coord::new(0, 0), &goals, &[]);
        q.w = 1.5;
        let r = low_level_search(&m, &mut DistanceCache::default(), &q, &DynamicObstacleSet::empty(0), &[], core::slice::from_ref(&other)).unwrap();
        assert!(r.path.vertices.iter().all(|&v| v != Coord::new(1, 1)));
        assert!(r.cost as f64 <= 1.5 * r.lower_bound as f64);
    }
}
