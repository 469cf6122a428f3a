use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{planning_inputs, BaselineKind, CpError};
use crate::conformal::CalibrationArtifact;
use crate::grid::{Coord, DistanceCache, GridMap};
use crate::mapf::{
    solve, AgentId, AgentTask, BeyondHorizon, Clock, Instance, Path, SolveError, SolverConfig, SolverMode,
};
use crate::prediction::{ObservationHistory, Predictor};
use crate::sim::MetricsRecord;

/// The uncontrolled agents as seen by the planner: their positions can be
/// observed and time can be advanced, nothing else. In particular the
/// controlled agents cannot influence them.
pub trait UncontrolledWorld {
    fn positions(&self) -> BTreeMap<AgentId, Coord>;
    fn advance(&mut self, map: &GridMap);
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    pub kind: BaselineKind,
    /// Replanning window `H`; also the prediction horizon.
    pub horizon: usize,
    /// Conflict horizon `ŵ >= H`.
    pub conflict_horizon: usize,
    /// Total timesteps `T̂`, a multiple of `H`.
    pub total_steps: usize,
    pub w: f64,
    pub beyond: BeyondHorizon,
    pub time_budget_s: f64,
    pub expansion_budget: Option<usize>,
    pub max_escalations: Option<u32>,
    /// Wall-clock allowance per window; `None` means `H` seconds.
    pub window_budget_s: Option<f64>,
    /// Consecutive windows an agent may stay excluded before the run is
    /// declared deadlocked.
    pub exclusion_cap: usize,
    /// Seed for goal assignment.
    pub seed: u64,
    pub record_events: bool,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Cp,
            horizon: 10,
            conflict_horizon: 10,
            total_steps: 100,
            w: 1.5,
            beyond: BeyondHorizon::Persist,
            time_budget_s: 100.0,
            expansion_budget: None,
            max_escalations: None,
            window_budget_s: None,
            exclusion_cap: 10,
            seed: 0,
            record_events: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionKind {
    Vertex,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub controlled: AgentId,
    pub uncontrolled: AgentId,
    pub kind: CollisionKind,
    /// The controlled agent was excluded from planning in this window.
    pub forced: bool,
}

/// State after the moves into timestep `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: usize,
    pub controlled: BTreeMap<AgentId, Coord>,
    pub uncontrolled: BTreeMap<AgentId, Coord>,
    pub collisions: Vec<CollisionEvent>,
    pub excluded: Vec<AgentId>,
    #[serde(default)]
    pub reached: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadlockReport {
    pub agent: AgentId,
    pub windows: usize,
    pub t: usize,
    pub metrics: MetricsRecord,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopOutcome {
    pub metrics: MetricsRecord,
    pub events: Vec<EventRecord>,
}

struct Controlled {
    pos: Coord,
    queue: VecDeque<Coord>,
    goals: usize,
    last_goal_step: usize,
    excluded_streak: usize,
}

/// Rolling-horizon planning: every `H` steps observe, predict, plan with
/// conflicts resolved up to `ŵ`, execute `H` steps.
///
/// `history` must end with the world's current positions; its timestep is
/// the start of the run. Controlled agents get ids `0..starts.len()`.
/// `goals`, when given, seeds each agent's goal queue; further goals are
/// drawn at random from free task spots.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    map: &GridMap,
    starts: &[Coord],
    goals: Option<&[Vec<Coord>]>,
    world: &mut dyn UncontrolledWorld,
    mut history: ObservationHistory,
    predictor: &mut dyn Predictor,
    calibration: Option<&CalibrationArtifact>,
    config: &ClosedLoopConfig,
    clock: &dyn Clock,
) -> Result<ClosedLoopOutcome, CpError> {
    let h_len = config.horizon;
    if h_len == 0 || config.conflict_horizon < h_len {
        return Err(CpError::Config(alloc::format!(
            "need 1 <= H <= w_hat, got H = {h_len}, w_hat = {}",
            config.conflict_horizon
        )));
    }
    if !config.total_steps.is_multiple_of(h_len) {
        return Err(CpError::Config(alloc::format!(
            "total steps {} is not a multiple of H = {h_len}",
            config.total_steps
        )));
    }
    if !(config.w >= 1.0) {
        return Err(CpError::Config(alloc::format!("w = {} < 1", config.w)));
    }
    if let Some(g) = goals {
        if g.len() != starts.len() {
            return Err(CpError::Config("one goal list per controlled agent".into()));
        }
        let all: Vec<&Coord> = g.iter().flatten().collect();
        let distinct: BTreeSet<&Coord> = all.iter().copied().collect();
        if distinct.len() != all.len() || all.iter().any(|c| !map.is_task_spot(**c)) {
            return Err(CpError::Config("initial goals must be distinct task spots".into()));
        }
    }
    let distinct_starts: BTreeSet<Coord> = starts.iter().copied().collect();
    if distinct_starts.len() != starts.len() || starts.iter().any(|s| !map.is_passable(*s)) {
        return Err(CpError::Config("controlled starts must be distinct passable cells".into()));
    }

    let t_start = history.t();
    let t_end = t_start + config.total_steps;
    let n = starts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cache = DistanceCache::default();
    let window_budget = config.window_budget_s.unwrap_or(h_len as f64);
    let mut agents: Vec<Controlled> = starts
        .iter()
        .enumerate()
        .map(|(i, &s)| Controlled {
            pos: s,
            queue: goals.map(|g| g[i].iter().copied().collect()).unwrap_or_default(),
            goals: 0,
            last_goal_step: 0,
            excluded_streak: 0,
        })
        .collect();

    let mut m = MetricsRecord::empty(n);
    let mut events = Vec::new();
    let mut set_sizes = Vec::new();
    let mut covered_windows = 0usize;
    let mut uncontrolled = world.positions();
    if config.record_events {
        events.push(EventRecord {
            t: t_start,
            controlled: agents.iter().enumerate().map(|(i, a)| (i, a.pos)).collect(),
            uncontrolled: uncontrolled.clone(),
            collisions: Vec::new(),
            excluded: Vec::new(),
            reached: Vec::new(),
        });
    }
    let run_started = clock.now_s();

    let mut t = t_start;
    while t < t_end {
        let window_started = clock.now_s();
        extend_goal_queues(map, &mut cache, &mut agents, h_len, &mut rng)?;

        let inputs = planning_inputs(
            config.kind,
            map,
            &history,
            predictor,
            calibration,
            h_len,
            config.beyond,
            &mut cache,
        )?;
        if let Some(sets) = &inputs.sets {
            set_sizes.push(sets.total_size() as f64 / h_len as f64);
        }

        // Plan, excluding agents the low level cannot route.
        let mut excluded: BTreeSet<AgentId> = BTreeSet::new();
        let plans: BTreeMap<AgentId, Path> = loop {
            let included: Vec<AgentId> = (0..n).filter(|i| !excluded.contains(i)).collect();
            if included.is_empty() {
                break BTreeMap::new();
            }
            let tasks: Vec<AgentTask> = included
                .iter()
                .map(|&i| {
                    let a = &agents[i];
                    let forbidden = agents
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .flat_map(|(_, b)| b.queue.iter().copied())
                        .collect();
                    AgentTask {
                        id: i,
                        start: a.pos,
                        goals: if a.queue.is_empty() {
                            alloc::vec![a.pos]
                        } else {
                            a.queue.iter().copied().collect()
                        },
                        forbidden,
                    }
                })
                .collect();
            let obstacles = inputs
                .obstacles
                .clone()
                .with_static(excluded.iter().map(|&i| agents[i].pos));
            let instance = Instance {
                map,
                agents: &tasks,
                t0: t,
                obstacles: &obstacles,
                predictions: &inputs.predictions,
            };
            let solver = SolverConfig {
                mode: SolverMode::DuaEcbs {
                    w: config.w,
                    horizon: Some(config.conflict_horizon),
                },
                time_budget_s: config.time_budget_s,
                expansion_budget: config.expansion_budget,
                max_escalations: config.max_escalations,
                max_timesteps: None,
            };
            match solve(&instance, &solver, clock, &mut cache) {
                Ok(sol) => {
                    m.expanded += sol.stats.expanded;
                    m.w_final = m.w_final.max(sol.stats.w_final);
                    break sol.paths.into_iter().map(|p| (p.agent, p)).collect();
                }
                Err(SolveError::SearchExhausted { agent } | SolveError::Unsolvable { agent: Some(agent) }) => {
                    log::debug!("t = {t}: agent {agent} cannot be routed; holding");
                    excluded.insert(agent);
                }
                Err(SolveError::Unsolvable { agent: None } | SolveError::BudgetExhausted { .. }) => {
                    let last = *included.last().expect("non-empty");
                    log::debug!("t = {t}: joint plan failed; holding agent {last}");
                    excluded.insert(last);
                }
                Err(e) => return Err(e.into()),
            }
        };
        m.exclusions += excluded.len();
        m.windows += 1;

        let runtime = clock.now_s() - window_started;
        m.window_runtimes_s.push(runtime);
        if runtime > window_budget {
            m.realtime_violations += 1;
            log::warn!("t = {t}: window took {runtime:.3} s, budget {window_budget:.3} s");
        }

        // Execute H steps.
        let mut window_collision = false;
        let mut window_covered = true;
        let mut outside_since: BTreeMap<AgentId, bool> = BTreeMap::new();
        for h in 1..=h_len {
            let now = t + h;
            let prev_c: Vec<Coord> = agents.iter().map(|a| a.pos).collect();
            let prev_u = uncontrolled;
            world.advance(map);
            uncontrolled = world.positions();
            history.observe(now, uncontrolled.iter().map(|(k, v)| (*k, *v)));
            for (i, a) in agents.iter_mut().enumerate() {
                if let Some(p) = plans.get(&i) {
                    let next = p.at(now);
                    debug_assert!(next == a.pos || next.is_adjacent(a.pos));
                    a.pos = next;
                }
            }
            if let Some(sets) = &inputs.sets {
                for (b, v) in &uncontrolled {
                    if !sets.contains(h, *v) {
                        window_covered = false;
                        outside_since.insert(*b, true);
                    }
                }
            }

            let cur_c: Vec<Coord> = agents.iter().map(|a| a.pos).collect();
            let collisions = detect_collisions(&prev_c, &cur_c, &prev_u, &uncontrolled, &excluded);
            let step = now - t_start - 1;
            m.collisions_per_step.push(collisions.len());
            m.collisions += collisions.len();
            m.forced_collisions += collisions.iter().filter(|c| c.forced).count();
            if !collisions.is_empty() {
                window_collision = true;
            }
            if config.kind == BaselineKind::Cp {
                for c in collisions.iter().filter(|c| !c.forced) {
                    if !outside_since.get(&c.uncontrolled).copied().unwrap_or(false) {
                        m.containment_violations += 1;
                        log::error!("t = {now}: collision inside the interval sets: {c:?}");
                    }
                }
            }
            m.controlled_conflicts += controlled_conflicts(&prev_c, &cur_c);
            m.uncontrolled_overlaps += overlaps(&uncontrolled);

            let mut reached = Vec::new();
            for (i, a) in agents.iter_mut().enumerate() {
                if a.queue.front() == Some(&a.pos) {
                    a.queue.pop_front();
                    a.goals += 1;
                    a.last_goal_step = step + 1;
                    reached.push(i);
                }
            }
            if config.record_events {
                events.push(EventRecord {
                    t: now,
                    controlled: cur_c.iter().copied().enumerate().collect(),
                    uncontrolled: uncontrolled.clone(),
                    collisions,
                    excluded: excluded.iter().copied().collect(),
                    reached,
                });
            }
        }
        if window_collision {
            m.violation_windows += 1;
        }
        if window_covered {
            covered_windows += 1;
        }
        t += h_len;

        for (i, a) in agents.iter_mut().enumerate() {
            if excluded.contains(&i) {
                a.excluded_streak += 1;
            } else {
                a.excluded_streak = 0;
            }
        }
        let stuck = agents
            .iter()
            .enumerate()
            .find(|(_, a)| a.excluded_streak >= config.exclusion_cap.max(1));
        if let Some((agent, a)) = stuck {
            let windows = a.excluded_streak;
            finish_metrics(&mut m, &agents, config, t - t_start, run_started, clock, &set_sizes, covered_windows);
            return Err(CpError::Deadlock(Box::new(DeadlockReport {
                agent,
                windows,
                t,
                metrics: m,
                events,
            })));
        }
    }

    finish_metrics(&mut m, &agents, config, t - t_start, run_started, clock, &set_sizes, covered_windows);
    Ok(ClosedLoopOutcome { metrics: m, events })
}

#[allow(clippy::too_many_arguments)]
fn finish_metrics(
    m: &mut MetricsRecord,
    agents: &[Controlled],
    config: &ClosedLoopConfig,
    steps: usize,
    run_started: f64,
    clock: &dyn Clock,
    set_sizes: &[f64],
    covered_windows: usize,
) {
    m.steps = steps;
    m.goals_per_agent = agents.iter().map(|a| a.goals).collect();
    m.goals = m.goals_per_agent.iter().sum();
    m.service_time = agents.iter().map(|a| a.last_goal_step).collect();
    m.throughput = m.goals as f64 / config.total_steps as f64;
    m.runtime_s = clock.now_s() - run_started;
    if config.kind == BaselineKind::Cp && m.windows > 0 {
        m.coverage = Some(covered_windows as f64 / m.windows as f64);
        if !set_sizes.is_empty() {
            m.mean_set_size = Some(set_sizes.iter().sum::<f64>() / set_sizes.len() as f64);
        }
    }
}

/// Appends random free task spots to every queue whose remaining route is
/// at most `h_len` steps long.
fn extend_goal_queues(
    map: &GridMap,
    cache: &mut DistanceCache,
    agents: &mut [Controlled],
    h_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), CpError> {
    for i in 0..agents.len() {
        loop {
            let mut route = 0usize;
            let mut at = agents[i].pos;
            for &g in &agents[i].queue {
                route += cache.distance(map, at, g)?.map_or(usize::MAX / 4, |d| d as usize);
                at = g;
            }
            if route > h_len {
                break;
            }
            let reserved: BTreeSet<Coord> = agents
                .iter()
                .flat_map(|a| a.queue.iter().copied())
                .chain(agents.iter().map(|a| a.pos))
                .collect();
            let field = cache.get(map, at)?;
            let pool: Vec<Coord> = map
                .task_spots()
                .iter()
                .copied()
                .filter(|s| !reserved.contains(s) && field.get(*s).is_some())
                .collect();
            match pool.choose(rng) {
                Some(&g) => agents[i].queue.push_back(g),
                None => break,
            }
        }
    }
    Ok(())
}

pub(crate) fn detect_collisions(
    prev_c: &[Coord],
    cur_c: &[Coord],
    prev_u: &BTreeMap<AgentId, Coord>,
    cur_u: &BTreeMap<AgentId, Coord>,
    excluded: &BTreeSet<AgentId>,
) -> Vec<CollisionEvent> {
    let mut out = Vec::new();
    for (a, (&pc, &cc)) in prev_c.iter().zip(cur_c).enumerate() {
        for (&b, &cu) in cur_u {
            let pu = prev_u.get(&b).copied().unwrap_or(cu);
            let kind = if cc == cu {
                Some(CollisionKind::Vertex)
            } else if pc != cc && pc == cu && pu == cc {
                Some(CollisionKind::Edge)
            } else {
                None
            };
            if let Some(kind) = kind {
                out.push(CollisionEvent {
                    controlled: a,
                    uncontrolled: b,
                    kind,
                    forced: excluded.contains(&a),
                });
            }
        }
    }
    out
}

pub(crate) fn controlled_conflicts(prev: &[Coord], cur: &[Coord]) -> usize {
    let mut n = 0;
    for i in 0..cur.len() {
        for j in i + 1..cur.len() {
            let swap = prev[i] != cur[i] && prev[i] == cur[j] && prev[j] == cur[i];
            if cur[i] == cur[j] || swap {
                n += 1;
            }
        }
    }
    n
}

fn overlaps(u: &BTreeMap<AgentId, Coord>) -> usize {
    let v: Vec<Coord> = u.values().copied().collect();
    let mut n = 0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            if v[i] == v[j] {
                n += 1;
            }
        }
    }
    n
}

/// Recomputes the collision and goal metrics from an event log alone.
/// Collisions are re-derived from positions, not read from the log.
pub fn replay_events(events: &[EventRecord], n_controlled: usize, total_steps: usize) -> MetricsRecord {
    let mut m = MetricsRecord::empty(n_controlled);
    let mut goals = alloc::vec![0usize; n_controlled];
    let mut last = alloc::vec![0usize; n_controlled];
    let Some(first) = events.first() else {
        return m;
    };
    for (k, pair) in events.windows(2).enumerate() {
        let (prev, cur) = (&pair[0], &pair[1]);
        let prev_c: Vec<Coord> = prev.controlled.values().copied().collect();
        let cur_c: Vec<Coord> = cur.controlled.values().copied().collect();
        let excluded: BTreeSet<AgentId> = cur.excluded.iter().copied().collect();
        let c = detect_collisions(&prev_c, &cur_c, &prev.uncontrolled, &cur.uncontrolled, &excluded);
        m.collisions_per_step.push(c.len());
        m.collisions += c.len();
        m.forced_collisions += c.iter().filter(|c| c.forced).count();
        m.controlled_conflicts += controlled_conflicts(&prev_c, &cur_c);
        m.uncontrolled_overlaps += overlaps(&cur.uncontrolled);
        for &a in &cur.reached {
            goals[a] += 1;
            last[a] = k + 1;
        }
    }
    m.steps = events.last().map_or(0, |e| e.t - first.t);
    m.goals = goals.iter().sum();
    m.goals_per_agent = goals;
    m.service_time = last;
    m.throughput = m.goals as f64 / total_steps as f64;
    m
}
