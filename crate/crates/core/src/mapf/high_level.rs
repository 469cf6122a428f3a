//! Constraint-tree search with an OPEN list ordered by lower bound and a
//! FOCAL list ordered by the number of conflicts.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::low_level::{search, Occupancy};
use super::{
    classify_conflict, count_conflicts, detect_first_conflict, AgentId, Clock, Constraint,
    DynamicObstacleSet, LowLevelError, LowLevelQuery, Path,
};
use crate::grid::{Coord, DistanceCache, GridError, GridMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverMode {
    /// Optimal CBS. Ignores obstacles and predictions; never escalates.
    CbsOptimal,
    /// Standard ECBS. Ignores obstacles and predictions.
    Ecbs { w: f64 },
    /// ECBS that avoids the obstacle set and predicted paths, resolving
    /// conflicts up to `t0 + horizon` when a horizon is given.
    DuaEcbs { w: f64, horizon: Option<usize> },
}

impl SolverMode {
    pub fn w(&self) -> f64 {
        match *self {
            SolverMode::CbsOptimal => 1.0,
            SolverMode::Ecbs { w } | SolverMode::DuaEcbs { w, .. } => w,
        }
    }

    fn horizon(&self) -> Option<usize> {
        match *self {
            SolverMode::DuaEcbs { horizon, .. } => horizon,
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub mode: SolverMode,
    /// Seconds of search before w is raised by one.
    pub time_budget_s: f64,
    /// High-level expansions before w is raised by one. Deterministic
    /// alternative to the time budget; both apply when set.
    pub expansion_budget: Option<usize>,
    /// Give up after this many escalations. `None` escalates forever.
    pub max_escalations: Option<u32>,
    /// Low-level timestep cap; default 4|V|.
    pub max_timesteps: Option<usize>,
}

impl SolverConfig {
    pub fn new(mode: SolverMode) -> Self {
        Self {
            mode,
            time_budget_s: 100.0,
            expansion_budget: None,
            max_escalations: None,
            max_timesteps: None,
        }
    }
}

/// A controlled agent: start, ordered goals (the last one is held), and
/// vertices it must never enter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentTask {
    pub id: AgentId,
    pub start: Coord,
    pub goals: Vec<Coord>,
    pub forbidden: Vec<Coord>,
}

impl AgentTask {
    pub fn new(id: AgentId, start: Coord, goal: Coord) -> Self {
        Self {
            id,
            start,
            goals: alloc::vec![goal],
            forbidden: Vec::new(),
        }
    }

    pub fn final_goal(&self) -> Coord {
        *self.goals.last().expect("agent has a goal")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub map: &'a GridMap,
    pub agents: &'a [AgentTask],
    /// Timestep at which all agents stand on their starts.
    pub t0: usize,
    pub obstacles: &'a DynamicObstacleSet,
    /// Rounded predicted paths of uncontrolled agents.
    pub predictions: &'a [Path],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub expanded: usize,
    pub generated: usize,
    pub low_level_expanded: usize,
    pub runtime_s: f64,
    pub w_final: f64,
    pub escalations: u32,
    /// Lower bound of the OPEN list when the solution was selected.
    pub lower_bound: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// One path per agent, in the order of `Instance::agents`.
    pub paths: Vec<Path>,
    /// Sum of service times.
    pub cost: usize,
    pub stats: SolveStats,
}

impl Solution {
    pub fn path(&self, agent: AgentId) -> Option<&Path> {
        self.paths.iter().find(|p| p.agent == agent)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("instance is unsolvable (agent {agent:?})")]
    Unsolvable { agent: Option<AgentId> },
    #[error("agent {agent}: no path avoids the dynamic obstacles")]
    SearchExhausted { agent: AgentId },
    #[error("search budget exhausted at w = {w_final}")]
    BudgetExhausted { w_final: f64, expanded: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

struct CtNode {
    constraints: Vec<Constraint>,
    paths: Vec<Path>,
    lower_bounds: Vec<usize>,
    cost: usize,
    lb: usize,
    focal_h: usize,
}

fn bound_of(w: f64, lb: usize) -> usize {
    libm::floor(w * lb as f64 + 1e-9) as usize
}

fn validate(inst: &Instance<'_>) -> Result<(), SolveError> {
    let m = inst.map;
    let mut starts = BTreeSet::new();
    let mut goals = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for a in inst.agents {
        if !ids.insert(a.id) {
            return Err(SolveError::InvalidInstance(alloc::format!("duplicate agent id {}", a.id)));
        }
        if a.goals.is_empty() {
            return Err(SolveError::InvalidInstance(alloc::format!("agent {} has no goal", a.id)));
        }
        if !m.is_passable(a.start) {
            return Err(SolveError::InvalidInstance(alloc::format!("agent {} start {} blocked", a.id, a.start)));
        }
        if let Some(g) = a.goals.iter().find(|g| !m.is_passable(**g)) {
            return Err(SolveError::InvalidInstance(alloc::format!("agent {} goal {} blocked", a.id, g)));
        }
        if !starts.insert(a.start) {
            return Err(SolveError::InvalidInstance(alloc::format!("two agents start at {}", a.start)));
        }
        if !goals.insert(a.final_goal()) {
            return Err(SolveError::InvalidInstance(alloc::format!("two agents end at {}", a.final_goal())));
        }
    }
    Ok(())
}

/// Plans conflict-free paths for all controlled agents.
///
/// ECBS modes return a solution whose cost is at most `w_final` times the
/// lower bound of the OPEN list at termination, hence at most `w_final`
/// times the optimum. When the time (or expansion) budget runs out, `w` is
/// raised by one and the search continues with the same tree.
pub fn solve(
    inst: &Instance<'_>,
    config: &SolverConfig,
    clock: &dyn Clock,
    cache: &mut DistanceCache,
) -> Result<Solution, SolveError> {
    validate(inst)?;
    let started = clock.now_s();
    let mode = config.mode;
    let mut w = mode.w();
    if w < 1.0 || !w.is_finite() {
        return Err(SolveError::InvalidInstance(alloc::format!("suboptimality factor {w} < 1")));
    }
    let horizon = mode.horizon();
    let horizon_end = horizon.map(|h| inst.t0 + h);
    let empty = DynamicObstacleSet::empty(inst.t0);
    let (obstacles, predictions): (&DynamicObstacleSet, &[Path]) = match mode {
        SolverMode::DuaEcbs { .. } => (inst.obstacles, inst.predictions),
        _ => (&empty, &[]),
    };
    let map = inst.map;
    let max_timesteps = Some(config.max_timesteps.unwrap_or(4 * map.num_vertices()));
    let mut stats = SolveStats {
        w_final: w,
        ..SolveStats::default()
    };
    if inst.agents.is_empty() {
        stats.runtime_s = clock.now_s() - started;
        return Ok(Solution {
            paths: Vec::new(),
            cost: 0,
            stats,
        });
    }

    let plan = |cache: &mut DistanceCache,
                stats: &mut SolveStats,
                idx: usize,
                constraints: &[Constraint],
                paths: &[Path],
                w: f64|
     -> Result<(Path, usize), LowLevelError> {
        let task = &inst.agents[idx];
        let query = LowLevelQuery {
            agent: task.id,
            start: task.start,
            goals: &task.goals,
            t0: inst.t0,
            constraints,
            forbidden: &task.forbidden,
            w,
            horizon,
            max_timesteps,
        };
        let others: Vec<&Path> = paths.iter().filter(|p| p.agent != task.id).collect();
        let occupancy = Occupancy::new(map, &others);
        let r = search(map, cache, &query, obstacles, predictions, &occupancy)?;
        stats.low_level_expanded += r.expanded;
        Ok((r.path, r.lower_bound))
    };

    // Root.
    let mut paths: Vec<Path> = Vec::with_capacity(inst.agents.len());
    let mut lower_bounds = Vec::with_capacity(inst.agents.len());
    for (i, task) in inst.agents.iter().enumerate() {
        match plan(cache, &mut stats, i, &[], &paths, w) {
            Ok((p, lb)) => {
                paths.push(p);
                lower_bounds.push(lb);
            }
            Err(LowLevelError::Grid(e)) => return Err(e.into()),
            Err(LowLevelError::Unreachable { .. }) => {
                return Err(SolveError::Unsolvable { agent: Some(task.id) })
            }
            Err(LowLevelError::SearchExhausted { .. }) => {
                let unconstrained = obstacles.is_empty() && predictions.is_empty() && task.forbidden.is_empty();
                return Err(if unconstrained {
                    SolveError::Unsolvable { agent: Some(task.id) }
                } else {
                    SolveError::SearchExhausted { agent: task.id }
                });
            }
        }
    }
    let root = make_node(Vec::new(), paths, lower_bounds, predictions, obstacles, horizon_end);

    let mut nodes: Vec<Option<CtNode>> = Vec::new();
    let mut open_lb: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut open_cost: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut focal: BTreeSet<(usize, usize, usize)> = BTreeSet::new();

    let mut lb_min = root.lb;
    let mut bound = bound_of(w, lb_min);
    let insert = |nodes: &mut Vec<Option<CtNode>>,
                  open_lb: &mut BTreeSet<(usize, usize)>,
                  open_cost: &mut BTreeSet<(usize, usize)>,
                  focal: &mut BTreeSet<(usize, usize, usize)>,
                  bound: usize,
                  node: CtNode| {
        let id = nodes.len();
        open_lb.insert((node.lb, id));
        open_cost.insert((node.cost, id));
        if node.cost <= bound {
            focal.insert((node.focal_h, node.cost, id));
        }
        nodes.push(Some(node));
    };
    insert(&mut nodes, &mut open_lb, &mut open_cost, &mut focal, bound, root);
    stats.generated = 1;

    loop {
        // Budget check and escalation.
        let elapsed = clock.now_s() - started;
        let over_time = elapsed > config.time_budget_s * (stats.escalations + 1) as f64;
        let over_nodes = config
            .expansion_budget
            .is_some_and(|b| stats.expanded >= b * (stats.escalations as usize + 1));
        if over_time || over_nodes {
            let capped = config
                .max_escalations
                .is_some_and(|m| stats.escalations >= m);
            if matches!(mode, SolverMode::CbsOptimal) || capped {
                return Err(SolveError::BudgetExhausted {
                    w_final: w,
                    expanded: stats.expanded,
                });
            }
            w += 1.0;
            stats.escalations += 1;
            stats.w_final = w;
            log::debug!("search budget exceeded, raising w to {w}");
        }

        let Some(&(head_lb, _)) = open_lb.first() else {
            return Err(SolveError::Unsolvable { agent: None });
        };
        lb_min = lb_min.max(head_lb);
        let new_bound = bound_of(w, lb_min);
        if new_bound > bound {
            for &(cost, id) in open_cost.range((bound + 1, 0)..) {
                if cost > new_bound {
                    break;
                }
                let n = nodes[id].as_ref().expect("open node present");
                focal.insert((n.focal_h, cost, id));
            }
            bound = new_bound;
        }

        let (_, _, id) = focal.pop_first().expect("focal is non-empty while open is");
        let node = nodes[id].take().expect("open node present");
        open_lb.remove(&(node.lb, id));
        open_cost.remove(&(node.cost, id));
        stats.expanded += 1;

        let Some(conflict) = detect_first_conflict(&node.paths, predictions, obstacles, horizon_end) else {
            stats.runtime_s = clock.now_s() - started;
            stats.lower_bound = lb_min;
            return Ok(Solution {
                cost: node.cost,
                paths: node.paths,
                stats,
            });
        };
        let recipients = classify_conflict(&conflict);
        if recipients.is_empty() {
            log::warn!("conflict between uncontrolled parties ignored: {conflict:?}");
        }
        for agent in recipients {
            let idx = inst
                .agents
                .iter()
                .position(|a| a.id == agent)
                .expect("conflict names a known agent");
            let constraint = conflict.constraint_for(agent).expect("agent is a party");

            debug_assert!(!node.constraints.contains(&constraint));
            let mut constraints = node.constraints.clone();
            constraints.push(constraint);
            let mut child_paths = node.paths.clone();
            let mut child_lbs = node.lower_bounds.clone();
            match plan(cache, &mut stats, idx, &constraints, &child_paths, w) {
                Ok((p, lb)) => {
                    child_paths[idx] = p;
                    child_lbs[idx] = lb.max(node.lower_bounds[idx]);
                }
                Err(LowLevelError::Grid(e)) => return Err(e.into()),
                Err(_) => continue,
            }
            let child = make_node(constraints, child_paths, child_lbs, predictions, obstacles, horizon_end);
            insert(&mut nodes, &mut open_lb, &mut open_cost, &mut focal, bound, child);
            stats.generated += 1;
        }
    }
}

fn make_node(
    constraints: Vec<Constraint>,
    paths: Vec<Path>,
    lower_bounds: Vec<usize>,
    predictions: &[Path],
    obstacles: &DynamicObstacleSet,
    horizon_end: Option<usize>,
) -> CtNode {
    let cost = paths.iter().map(Path::cost).sum();
    let lb = lower_bounds.iter().sum();
    let focal_h = count_conflicts(&paths, predictions, obstacles, horizon_end);
    CtNode {
        constraints,
        paths,
        lower_bounds,
        cost,
        lb,
        focal_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapf::{BeyondHorizon, NoClock};
    use alloc::vec;

    fn c(r: usize, col: usize) -> Coord {
        Coord::new(r, col)
    }

    fn solve_simple(map: &GridMap, agents: &[AgentTask], mode: SolverMode) -> Result<Solution, SolveError> {
        let obs = DynamicObstacleSet::empty(0);
        let inst = Instance {
            map,
            agents,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        solve(&inst, &SolverConfig::new(mode), &NoClock, &mut DistanceCache::default())
    }

    #[test]
    fn single_agent_gets_shortest_path() {
        let m = GridMap::open(5, 5).unwrap();
        let agents = [AgentTask::new(0, c(0, 0), c(4, 3))];
        let s = solve_simple(&m, &agents, SolverMode::Ecbs { w: 1.5 }).unwrap();
        assert_eq!(s.cost, 7);
    }

    #[test]
    fn corridor_swap_with_bay() {
        // .....
        // @@.@@   bay at (1,2)
        let mask = vec![true, true, true, true, true, false, false, true, false, false];
        let m = GridMap::new("bay", 5, 2, mask, None).unwrap();
        let agents = [AgentTask::new(0, c(0, 0), c(0, 4)), AgentTask::new(1, c(0, 4), c(0, 0))];
        let s = solve_simple(&m, &agents, SolverMode::CbsOptimal).unwrap();
        assert!(detect_first_conflict(&s.paths, &[], &DynamicObstacleSet::empty(0), None).is_none());
        // one agent detours through the bay (+2), the other waits once (+1)
        assert_eq!(s.cost, 4 + 4 + 3);
    }

    #[test]
    fn unsolvable_corridor_swap() {
        let m = GridMap::open(3, 1).unwrap();
        let agents = [AgentTask::new(0, c(0, 0), c(0, 2)), AgentTask::new(1, c(0, 2), c(0, 0))];
        let mut cfg = SolverConfig::new(SolverMode::CbsOptimal);
        cfg.max_timesteps = Some(8);
        let obs = DynamicObstacleSet::empty(0);
        let inst = Instance {
            map: &m,
            agents: &agents,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        let err = solve(&inst, &cfg, &NoClock, &mut DistanceCache::default()).unwrap_err();
        assert_eq!(err, SolveError::Unsolvable { agent: None });
    }

    #[test]
    fn invalid_instances_rejected() {
        let m = GridMap::open(3, 3).unwrap();
        let agents = [AgentTask::new(0, c(0, 0), c(2, 2)), AgentTask::new(1, c(0, 0), c(1, 1))];
        assert!(matches!(
            solve_simple(&m, &agents, SolverMode::CbsOptimal),
            Err(SolveError::InvalidInstance(_))
        ));
        let agents = [AgentTask::new(0, c(0, 0), c(2, 2)), AgentTask::new(1, c(0, 1), c(2, 2))];
        assert!(solve_simple(&m, &agents, SolverMode::CbsOptimal).is_err());
    }

    #[test]
    fn expansion_budget_escalates_w() {
        let m = GridMap::open(4, 4).unwrap();
        let agents: Vec<AgentTask> = (0..4)
            .map(|i| AgentTask::new(i, c(i, 0), c(3 - i, 3)))
            .collect();
        let obs = DynamicObstacleSet::empty(0);
        let inst = Instance {
            map: &m,
            agents: &agents,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        let mut cfg = SolverConfig::new(SolverMode::Ecbs { w: 1.0 });
        cfg.expansion_budget = Some(1);
        let s = solve(&inst, &cfg, &NoClock, &mut DistanceCache::default()).unwrap();
        assert_eq!(s.stats.w_final, 1.0 + s.stats.escalations as f64);
        assert!(s.cost as f64 <= s.stats.w_final * s.stats.lower_bound as f64 + 1e-9);
    }

    #[test]
    fn dua_mode_avoids_interval_vertices() {
        let m = GridMap::open(5, 3).unwrap();
        let agents = [AgentTask::new(0, c(1, 0), c(1, 4))];
        let steps = vec![vec![c(1, 2)]; 4];
        let obs = DynamicObstacleSet::new(0, vec![c(1, 2)], steps, BeyondHorizon::Drop);
        let inst = Instance {
            map: &m,
            agents: &agents,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        let cfg = SolverConfig::new(SolverMode::DuaEcbs { w: 1.5, horizon: None });
        let s = solve(&inst, &cfg, &NoClock, &mut DistanceCache::default()).unwrap();
        assert!(detect_first_conflict(&s.paths, &[], &obs, None).is_none());
        // plain ECBS walks straight through
        let plain = solve_simple(&m, &agents, SolverMode::Ecbs { w: 1.5 }).unwrap();
        assert!(detect_first_conflict(&plain.paths, &[], &obs, None).is_some());
    }

    #[test]
    fn blocked_root_reports_search_exhausted() {
        let m = GridMap::open(3, 1).unwrap();
        let agents = [AgentTask::new(0, c(0, 0), c(0, 2))];
        let obs = DynamicObstacleSet::new(0, vec![], vec![vec![c(0, 1)]], BeyondHorizon::Persist);
        let inst = Instance {
            map: &m,
            agents: &agents,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        let cfg = SolverConfig::new(SolverMode::DuaEcbs { w: 1.5, horizon: None });
        let err = solve(&inst, &cfg, &NoClock, &mut DistanceCache::default()).unwrap_err();
        assert_eq!(err, SolveError::SearchExhausted { agent: 0 });
    }
}
