use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{random_spawn_cells, stream_rng, MetricsRecord, SimError, WalkerModel};
use crate::conformal::CalibrationArtifact;
use crate::cp_solver::{
    controlled_conflicts, detect_collisions, run_closed_loop, solve_open_loop, BaselineKind, ClosedLoopConfig,
    ClosedLoopOutcome, OpenLoopConfig, OpenLoopPlan,
};
use crate::grid::{Coord, DistanceCache, GridMap};
use crate::mapf::{AgentId, AgentTask, BeyondHorizon, Clock};
use crate::prediction::{ObservationHistory, Predictor, DEFAULT_HISTORY_LEN};

/// Parameters shared by the one-shot and lifelong experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub n_controlled: usize,
    pub m_uncontrolled: usize,
    pub delta: f64,
    /// Prediction horizon and replanning window `H`.
    pub horizon: usize,
    /// Conflict horizon `ŵ`.
    pub conflict_horizon: usize,
    pub w: f64,
    /// Lifelong mission length `T̂`.
    pub total_steps: usize,
    pub seed: u64,
    pub history_len: usize,
    pub beyond: BeyondHorizon,
    pub time_budget_s: f64,
    pub expansion_budget: Option<usize>,
    pub max_escalations: Option<u32>,
    pub exclusion_cap: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n_controlled: 10,
            m_uncontrolled: 5,
            delta: 0.05,
            horizon: 10,
            conflict_horizon: 10,
            w: 1.5,
            total_steps: 100,
            seed: 0,
            history_len: DEFAULT_HISTORY_LEN,
            beyond: BeyondHorizon::Persist,
            time_budget_s: 100.0,
            expansion_budget: None,
            max_escalations: None,
            exclusion_cap: 10,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::Parameters(msg.into()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.horizon == 0 || self.conflict_horizon < self.horizon {
            return bad("need 1 <= H <= w_hat");
        }
        if !(self.w >= 1.0) {
            return bad("w must be at least 1");
        }
        if self.history_len < 2 {
            return bad("history length must be at least 2");
        }
        Ok(())
    }
}

/// Initial world of a scenario, drawn from its seed: walkers that have
/// already been observed for `history_len` steps, controlled starts on free
/// non-task cells and one distinct task spot per controlled agent.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub walkers: WalkerModel,
    pub history: ObservationHistory,
    pub starts: Vec<Coord>,
    pub goals: Vec<Coord>,
}

impl ScenarioSetup {
    pub fn new(map: &GridMap, scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let seed = scenario.seed;
        let mut walkers = WalkerModel::spawn(map, scenario.m_uncontrolled, &[], stream_rng(seed, 1))?;
        let mut history = ObservationHistory::new(scenario.history_len);
        history.observe(0, walkers.positions());
        for t in 1..scenario.history_len {
            walkers.step(map);
            history.observe(t, walkers.positions());
        }
        let occupied: Vec<Coord> = walkers.positions().into_values().collect();
        let starts = random_spawn_cells(map, scenario.n_controlled, &occupied, &mut stream_rng(seed, 2))?;
        let spots = map.task_spots();
        if spots.len() < scenario.n_controlled {
            return Err(SimError::Parameters(alloc::format!(
                "{} task spots for {} controlled agents",
                spots.len(),
                scenario.n_controlled
            )));
        }
        let goals = spots
            .choose_multiple(&mut stream_rng(seed, 3), scenario.n_controlled)
            .copied()
            .collect();
        Ok(Self {
            walkers,
            history,
            starts,
            goals,
        })
    }
}

/// Lifelong run of `kind` on the scenario's world. Every kind sees the same
/// walkers and starts for a given seed.
pub fn run_baseline(
    kind: BaselineKind,
    map: &GridMap,
    scenario: &Scenario,
    predictor: &mut dyn Predictor,
    calibration: Option<&CalibrationArtifact>,
    clock: &dyn Clock,
) -> Result<ClosedLoopOutcome, SimError> {
    let mut setup = ScenarioSetup::new(map, scenario)?;
    if !scenario.total_steps.is_multiple_of(scenario.horizon) {
        return Err(SimError::Parameters("total steps must be a multiple of H".into()));
    }
    let config = ClosedLoopConfig {
        kind,
        horizon: scenario.horizon,
        conflict_horizon: scenario.conflict_horizon,
        total_steps: scenario.total_steps,
        w: scenario.w,
        beyond: scenario.beyond,
        time_budget_s: scenario.time_budget_s,
        expansion_budget: scenario.expansion_budget,
        max_escalations: scenario.max_escalations,
        window_budget_s: None,
        exclusion_cap: scenario.exclusion_cap,
        seed: scenario.seed ^ 0x9e37_79b9_7f4a_7c15,
        record_events: true,
    };
    Ok(run_closed_loop(
        map,
        &setup.starts,
        None,
        &mut setup.walkers,
        setup.history,
        predictor,
        calibration,
        &config,
        clock,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopEpisode {
    pub metrics: MetricsRecord,
    pub plan: OpenLoopPlan,
    pub starts: Vec<Coord>,
    pub goals: Vec<Coord>,
}

/// One-shot run: plan once, then execute until every controlled agent has
/// arrived while the walkers keep moving. Collisions are counted up to the
/// makespan; interval coverage over the first `H` steps.
pub fn run_open_loop_episode(
    kind: BaselineKind,
    map: &GridMap,
    scenario: &Scenario,
    predictor: &mut dyn Predictor,
    calibration: Option<&CalibrationArtifact>,
    clock: &dyn Clock,
) -> Result<OpenLoopEpisode, SimError> {
    let started = clock.now_s();
    let mut setup = ScenarioSetup::new(map, scenario)?;
    let tasks: Vec<AgentTask> = setup
        .starts
        .iter()
        .zip(&setup.goals)
        .enumerate()
        .map(|(i, (&s, &g))| AgentTask::new(i, s, g))
        .collect();
    let config = OpenLoopConfig {
        kind,
        horizon: scenario.horizon,
        w: scenario.w,
        beyond: scenario.beyond,
        time_budget_s: scenario.time_budget_s,
        expansion_budget: scenario.expansion_budget,
        max_escalations: scenario.max_escalations,
        max_timesteps: None,
    };
    let mut cache = DistanceCache::default();
    let plan = solve_open_loop(
        map,
        &tasks,
        &setup.history,
        predictor,
        calibration,
        &config,
        clock,
        &mut cache,
    )?;
    let t0 = setup.history.t();
    let paths = &plan.solution.paths;
    let makespan = paths.iter().map(|p| p.cost()).max().unwrap_or(0);
    let h_len = scenario.horizon;

    let mut m = MetricsRecord::empty(tasks.len());
    let mut covered = true;
    let mut outside: BTreeMap<AgentId, bool> = BTreeMap::new();
    let mut prev_c: Vec<Coord> = paths.iter().map(|p| p.at(t0)).collect();
    let mut prev_u = setup.walkers.positions();
    let no_exclusions = Default::default();
    for s in 1..=makespan.max(h_len) {
        setup.walkers.step(map);
        let cur_u = setup.walkers.positions();
        let cur_c: Vec<Coord> = paths.iter().map(|p| p.at(t0 + s)).collect();
        if let Some(sets) = plan.inputs.sets.as_ref().filter(|_| s <= h_len) {
            for (b, v) in &cur_u {
                if !sets.contains(s, *v) {
                    covered = false;
                    outside.insert(*b, true);
                }
            }
        }
        if s <= makespan {
            let collisions = detect_collisions(&prev_c, &cur_c, &prev_u, &cur_u, &no_exclusions);
            if kind == BaselineKind::Cp && s <= h_len {
                m.containment_violations += collisions
                    .iter()
                    .filter(|c| !outside.get(&c.uncontrolled).copied().unwrap_or(false))
                    .count();
            }
            m.collisions_per_step.push(collisions.len());
            m.collisions += collisions.len();
            m.controlled_conflicts += controlled_conflicts(&prev_c, &cur_c);
        }
        prev_c = cur_c;
        prev_u = cur_u;
    }
    m.steps = makespan;
    m.makespan = Some(makespan);
    m.goals_per_agent = alloc::vec![1; tasks.len()];
    m.goals = tasks.len();
    m.service_time = paths.iter().map(|p| p.cost()).collect();
    m.throughput = if makespan == 0 {
        0.0
    } else {
        tasks.len() as f64 / makespan as f64
    };
    m.windows = 1;
    m.violation_windows = usize::from(m.collisions > 0);
    if kind == BaselineKind::Cp {
        m.coverage = Some(if covered { 1.0 } else { 0.0 });
        m.mean_set_size = plan
            .inputs
            .sets
            .as_ref()
            .map(|s| s.total_size() as f64 / h_len.max(1) as f64);
    }
    m.expanded = plan.solution.stats.expanded;
    m.w_final = plan.solution.stats.w_final;
    m.runtime_s = clock.now_s() - started;
    m.window_runtimes_s = alloc::vec![plan.solution.stats.runtime_s];
    Ok(OpenLoopEpisode {
        metrics: m,
        plan,
        starts: setup.starts,
        goals: setup.goals,
    })
}
