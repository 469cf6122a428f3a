//! Planning around uncontrolled agents: interval vertex sets, the one-shot
//! planner and the rolling-horizon loop.

mod closed_loop;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformal::CalibrationArtifact;
use crate::grid::{Coord, DistanceCache, GridError, GridMap};
use crate::mapf::{
    solve, AgentId, AgentTask, BeyondHorizon, Clock, DynamicObstacleSet, Instance, Path, SolveError,
    Solution, SolverConfig, SolverMode,
};
use crate::prediction::{
    predict_astar_goal, predict_constant, ObservationHistory, Point, PredictionBundle, PredictionError,
    Predictor,
};

pub use closed_loop::{
    replay_events, run_closed_loop, ClosedLoopConfig, ClosedLoopOutcome, CollisionEvent, CollisionKind, DeadlockReport,
    EventRecord, UncontrolledWorld,
};
pub(crate) use closed_loop::{controlled_conflicts, detect_collisions};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CpError {
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("CP planning needs a calibration artifact")]
    MissingCalibration,
    #[error("calibration covers {artifact} steps but the planner uses {requested}")]
    HorizonMismatch { artifact: usize, requested: usize },
    #[error("no current position for uncontrolled agent {0}")]
    MissingAgent(AgentId),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("agent {} excluded for {} consecutive windows at t = {}", .0.agent, .0.windows, .0.t)]
    Deadlock(alloc::boxed::Box<DeadlockReport>),
}

/// How the planner learns about uncontrolled agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Nothing.
    Ignore,
    /// Current positions, blocked for the whole window.
    Obstacle,
    /// Predicted paths only.
    Pred,
    /// Predicted paths plus calibrated interval vertex sets.
    Cp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Ignore,
        BaselineKind::Obstacle,
        BaselineKind::Pred,
        BaselineKind::Cp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Ignore => "IGNORE",
            BaselineKind::Obstacle => "OBSTACLE",
            BaselineKind::Pred => "PRED",
            BaselineKind::Cp => "CP",
        }
    }

    fn uses_predictions(self) -> bool {
        matches!(self, BaselineKind::Pred | BaselineKind::Cp)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ignore" => Ok(BaselineKind::Ignore),
            "obstacle" => Ok(BaselineKind::Obstacle),
            "pred" => Ok(BaselineKind::Pred),
            "cp" => Ok(BaselineKind::Cp),
            _ => Err(alloc::format!("unknown baseline {s:?} (ignore|obstacle|pred|cp)")),
        }
    }
}

/// Where the vertices of one step came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProvenance {
    pub radius: f64,
    pub points: Vec<(AgentId, Point)>,
}

/// `steps[h - 1]` holds the vertices that some uncontrolled agent may occupy
/// at `issued_at + h`: within the calibrated radius of its prediction and at
/// most `h` hops from where it was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalVertexSets {
    pub issued_at: usize,
    pub steps: Vec<Vec<Coord>>,
    pub provenance: Vec<StepProvenance>,
}

impl IntervalVertexSets {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Whether `v` is in the set of step `h` (1-based).
    pub fn contains(&self, h: usize, v: Coord) -> bool {
        h >= 1
            && self
                .steps
                .get(h - 1)
                .is_some_and(|s| s.binary_search(&v).is_ok())
    }

    pub fn total_size(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn to_obstacles(&self, current: &BTreeMap<AgentId, Coord>, beyond: BeyondHorizon) -> DynamicObstacleSet {
        DynamicObstacleSet::new(
            self.issued_at,
            current.values().copied().collect(),
            self.steps.clone(),
            beyond,
        )
    }
}

pub fn discretize(
    radii: &[f64],
    bundle: &PredictionBundle,
    current: &BTreeMap<AgentId, Coord>,
    map: &GridMap,
    cache: &mut DistanceCache,
) -> Result<IntervalVertexSets, CpError> {
    let horizon = radii.len();
    if bundle.horizon != horizon {
        return Err(CpError::HorizonMismatch {
            artifact: horizon,
            requested: bundle.horizon,
        });
    }
    let mut steps: Vec<BTreeSet<Coord>> = alloc::vec![BTreeSet::new(); horizon];
    let mut provenance: Vec<StepProvenance> = radii
        .iter()
        .map(|&radius| StepProvenance {
            radius,
            points: Vec::new(),
        })
        .collect();
    for (id, pts) in &bundle.points {
        let cur = *current.get(id).ok_or(CpError::MissingAgent(*id))?;
        let field = cache.get(map, cur)?;
        // Vertices within `horizon` hops, with their hop distance.
        let ball: Vec<(u32, Coord)> = map
            .passable_cells()
            .filter_map(|v| {
                let d = field.at(map.index(v));
                (d as usize <= horizon).then_some((d, v))
            })
            .collect();
        for (h, p) in pts.iter().enumerate().take(horizon) {
            let r = radii[h];
            provenance[h].points.push((*id, *p));
            for &(d, v) in &ball {
                if d as usize <= h + 1 && p.distance(Point::from(v)) <= r {
                    steps[h].insert(v);
                }
            }
        }
    }
    Ok(IntervalVertexSets {
        issued_at: bundle.issued_at,
        steps: steps.into_iter().map(|s| s.into_iter().collect()).collect(),
        provenance,
    })
}

/// What the solver gets to see for one planning call.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningInputs {
    pub obstacles: DynamicObstacleSet,
    pub predictions: Vec<Path>,
    pub bundle: Option<PredictionBundle>,
    pub sets: Option<IntervalVertexSets>,
}

/// Predict with `predictor`, falling back to the goal-seeking baseline and
/// then to constant predictions when it fails.
pub fn predict_with_fallback(
    predictor: &mut dyn Predictor,
    history: &ObservationHistory,
    map: &GridMap,
    horizon: usize,
    cache: &mut DistanceCache,
) -> Result<PredictionBundle, PredictionError> {
    let first = predictor
        .predict(history, map, horizon)
        .and_then(|mut b| {
            b.validate(history.agents())?;
            b.clamp(map);
            Ok(b)
        });
    match first {
        Ok(b) => Ok(b),
        Err(e @ (PredictionError::ZeroHorizon | PredictionError::EmptyHistory)) => Err(e),
        Err(e) => {
            log::warn!("predictor {} failed ({e}); falling back", predictor.name());
            predict_astar_goal(history, map, horizon, cache).or_else(|_| predict_constant(history, horizon))
        }
    }
}

/// Builds the obstacle set and predicted paths for `kind` at `history.t()`.
pub fn planning_inputs(
    kind: BaselineKind,
    map: &GridMap,
    history: &ObservationHistory,
    predictor: &mut dyn Predictor,
    calibration: Option<&CalibrationArtifact>,
    horizon: usize,
    beyond: BeyondHorizon,
    cache: &mut DistanceCache,
) -> Result<PlanningInputs, CpError> {
    let t = history.t();
    let current = history.current_positions();
    if kind == BaselineKind::Cp {
        let cal = calibration.ok_or(CpError::MissingCalibration)?;
        if cal.horizon != horizon {
            return Err(CpError::HorizonMismatch {
                artifact: cal.horizon,
                requested: horizon,
            });
        }
    }
    if current.is_empty() {
        return Ok(PlanningInputs {
            obstacles: DynamicObstacleSet::empty(t),
            predictions: Vec::new(),
            bundle: None,
            sets: None,
        });
    }
    let positions: Vec<Coord> = current.values().copied().collect();
    let mut inputs = match kind {
        BaselineKind::Ignore => PlanningInputs {
            obstacles: DynamicObstacleSet::empty(t),
            predictions: Vec::new(),
            bundle: None,
            sets: None,
        },
        BaselineKind::Obstacle => PlanningInputs {
            obstacles: DynamicObstacleSet::new(t, positions.clone(), alloc::vec![positions; horizon], beyond),
            predictions: Vec::new(),
            bundle: None,
            sets: None,
        },
        BaselineKind::Pred | BaselineKind::Cp => PlanningInputs {
            obstacles: DynamicObstacleSet::new(t, positions, Vec::new(), beyond),
            predictions: Vec::new(),
            bundle: None,
            sets: None,
        },
    };
    if kind.uses_predictions() {
        let bundle = predict_with_fallback(predictor, history, map, horizon, cache)?;
        inputs.predictions = bundle.predicted_paths(map, &current);
        if kind == BaselineKind::Cp {
            let cal = calibration.expect("checked above");
            let sets = discretize(&cal.radii, &bundle, &current, map, cache)?;
            inputs.obstacles = sets.to_obstacles(&current, beyond);
            inputs.sets = Some(sets);
        }
        inputs.bundle = Some(bundle);
    }
    Ok(inputs)
}

#[derive(Debug, Clone)]
pub struct OpenLoopConfig {
    pub kind: BaselineKind,
    pub horizon: usize,
    pub w: f64,
    pub beyond: BeyondHorizon,
    pub time_budget_s: f64,
    pub expansion_budget: Option<usize>,
    pub max_escalations: Option<u32>,
    /// Low-level timestep cap (the mission horizon).
    pub max_timesteps: Option<usize>,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Cp,
            horizon: 15,
            w: 1.5,
            beyond: BeyondHorizon::Persist,
            time_budget_s: 100.0,
            expansion_budget: None,
            max_escalations: None,
            max_timesteps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPlan {
    pub solution: Solution,
    pub inputs: PlanningInputs,
}

/// One-shot planning from the observations up to `history.t()`: predict
/// once, build interval sets, solve with every agent starting at
/// `history.t()`.
pub fn solve_open_loop(
    map: &GridMap,
    tasks: &[AgentTask],
    history: &ObservationHistory,
    predictor: &mut dyn Predictor,
    calibration: Option<&CalibrationArtifact>,
    config: &OpenLoopConfig,
    clock: &dyn Clock,
    cache: &mut DistanceCache,
) -> Result<OpenLoopPlan, CpError> {
    let inputs = planning_inputs(
        config.kind,
        map,
        history,
        predictor,
        calibration,
        config.horizon,
        config.beyond,
        cache,
    )?;
    let instance = Instance {
        map,
        agents: tasks,
        t0: history.t(),
        obstacles: &inputs.obstacles,
        predictions: &inputs.predictions,
    };
    let solver = SolverConfig {
        mode: SolverMode::DuaEcbs {
            w: config.w,
            horizon: None,
        },
        time_budget_s: config.time_budget_s,
        expansion_budget: config.expansion_budget,
        max_escalations: config.max_escalations,
        max_timesteps: config.max_timesteps,
    };
    let solution = solve(&instance, &solver, clock, cache)?;
    Ok(OpenLoopPlan { solution, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapf::{detect_first_conflict, NoClock};
    use crate::prediction::ConstantPredictor;
    use alloc::vec;

    fn bundle(points: &[(AgentId, &[(f64, f64)])]) -> PredictionBundle {
        let horizon = points[0].1.len();
        PredictionBundle {
            issued_at: 0,
            horizon,
            points: points
                .iter()
                .map(|(id, p)| (*id, p.iter().map(|&(r, c)| Point::new(r, c)).collect()))
                .collect(),
        }
    }

    #[test]
    fn zero_radius_on_vertex_gives_single_vertex() {
        let m = GridMap::open(5, 5).unwrap();
        let b = bundle(&[(0, &[(2.0, 3.0)])]);
        let cur = [(0, Coord::new(2, 2))].into();
        let s = discretize(&[0.0], &b, &cur, &m, &mut DistanceCache::default()).unwrap();
        assert_eq!(s.steps, vec![vec![Coord::new(2, 3)]]);
    }

    #[test]
    fn unit_radius_at_own_cell_is_a_plus() {
        let m = GridMap::open(11, 11).unwrap();
        let b = bundle(&[(0, &[(5.0, 5.0)])]);
        let cur = [(0, Coord::new(5, 5))].into();
        let s = discretize(&[1.0], &b, &cur, &m, &mut DistanceCache::default()).unwrap();
        let plus = vec![
            Coord::new(4, 5),
            Coord::new(5, 4),
            Coord::new(5, 5),
            Coord::new(5, 6),
            Coord::new(6, 5),
        ];
        assert_eq!(s.steps[0], plus);
    }

    #[test]
    fn far_vertices_are_unreachable() {
        // Wall between (0,0) and (0,2) forces a long detour.
        let mut mask = vec![true; 15];
        mask[1] = false;
        mask[6] = false;
        let m = GridMap::new("u", 5, 3, mask, None).unwrap();
        let b = bundle(&[(0, &[(0.0, 1.5)])]);
        let cur = [(0, Coord::new(0, 0))].into();
        let s = discretize(&[0.6], &b, &cur, &m, &mut DistanceCache::default()).unwrap();
        assert!(s.steps[0].is_empty());
        let s = discretize(&[f64::INFINITY], &b, &cur, &m, &mut DistanceCache::default()).unwrap();
        assert_eq!(s.steps[0], vec![Coord::new(0, 0), Coord::new(1, 0)]);
    }

    #[test]
    fn open_loop_without_uncontrolled_matches_plain_ecbs() {
        let m = GridMap::open(6, 6).unwrap();
        let tasks = [
            AgentTask::new(0, Coord::new(0, 0), Coord::new(5, 5)),
            AgentTask::new(1, Coord::new(5, 0), Coord::new(0, 5)),
        ];
        let history = ObservationHistory::new(4);
        let plan = solve_open_loop(
            &m,
            &tasks,
            &history,
            &mut ConstantPredictor,
            None,
            &OpenLoopConfig {
                kind: BaselineKind::Pred,
                ..OpenLoopConfig::default()
            },
            &NoClock,
            &mut DistanceCache::default(),
        )
        .unwrap();
        let obs = DynamicObstacleSet::empty(0);
        let inst = Instance {
            map: &m,
            agents: &tasks,
            t0: 0,
            obstacles: &obs,
            predictions: &[],
        };
        let plain = solve(
            &inst,
            &SolverConfig::new(SolverMode::Ecbs { w: 1.5 }),
            &NoClock,
            &mut DistanceCache::default(),
        )
        .unwrap();
        assert_eq!(plan.solution.paths, plain.paths);
        assert_eq!(plan.solution.cost, plain.cost);
    }

    #[test]
    fn open_loop_avoids_a_stationary_agent() {
        let m = GridMap::open(5, 3).unwrap();
        let tasks = [AgentTask::new(0, Coord::new(1, 0), Coord::new(1, 4))];
        let mut history = ObservationHistory::new(4);
        history.observe(0, [(9, Coord::new(1, 2))]);
        let cal = CalibrationArtifact {
            delta: 0.05,
            horizon: 3,
            alphas: vec![1.0; 3],
            radii: vec![0.5; 3],
            cal2_size: 19,
            method: "quantile-fallback".into(),
            map: None,
            predictor: None,
            uncontrolled: None,
        };
        let config = OpenLoopConfig {
            horizon: 3,
            beyond: BeyondHorizon::Drop,
            ..OpenLoopConfig::default()
        };
        let plan = solve_open_loop(
            &m,
            &tasks,
            &history,
            &mut ConstantPredictor,
            Some(&cal),
            &config,
            &NoClock,
            &mut DistanceCache::default(),
        )
        .unwrap();
        let sets = plan.inputs.sets.as_ref().unwrap();
        let path = &plan.solution.paths[0];
        for h in 1..=3 {
            assert!(!sets.contains(h, path.at(h)));
        }
        assert!(detect_first_conflict(&plan.solution.paths, &plan.inputs.predictions, &plan.inputs.obstacles, None).is_none());
    }
}
