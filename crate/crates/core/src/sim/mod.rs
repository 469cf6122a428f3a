//! Uncontrolled-agent simulation, trajectory datasets, experiment runners and
//! metrics.

mod metrics;
mod scenario;

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationSample, ConformalError};
use crate::cp_solver::{CpError, UncontrolledWorld};
use crate::grid::{Coord, DistanceCache, GridError, GridMap};
use crate::mapf::AgentId;
use crate::prediction::{ObservationHistory, PredictionError, Predictor};

pub use crate::cp_solver::BaselineKind;
pub use metrics::{aggregate, MetricsRecord, Stat, Summary};
pub use scenario::{run_baseline, run_open_loop_episode, Scenario, ScenarioSetup};

/// Goal redraws before a walker gives up and waits for a step.
pub const GOAL_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("map has {available} spawn cells, {needed} needed")]
    InsufficientSpawnCells { needed: usize, available: usize },
    #[error("invalid parameters: {0}")]
    Parameters(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Cp(#[from] CpError),
}

/// Independent random stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `count` distinct passable cells that are not task spots, avoiding
/// `taken`.
pub fn random_spawn_cells(
    map: &GridMap,
    count: usize,
    taken: &[Coord],
    rng: &mut impl Rng,
) -> Result<Vec<Coord>, SimError> {
    let cells: Vec<Coord> = map
        .passable_cells()
        .filter(|c| !map.is_task_spot(*c) && !taken.contains(c))
        .collect();
    if cells.len() < count {
        return Err(SimError::InsufficientSpawnCells {
            needed: count,
            available: cells.len(),
        });
    }
    Ok(cells.choose_multiple(rng, count).copied().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walker {
    pub id: AgentId,
    pub pos: Coord,
    pub goal: Coord,
    route: VecDeque<Coord>,
}

/// Uncontrolled agents following shortest paths to random task spots. They
/// ignore every other agent; the model takes no input besides its own
/// state and random stream.
#[derive(Debug, Clone)]
pub struct WalkerModel {
    walkers: Vec<Walker>,
    rng: ChaCha8Rng,
    cache: DistanceCache,
}

impl WalkerModel {
    /// `m` walkers on random non-task-spot cells avoiding `taken`.
    pub fn spawn(map: &GridMap, m: usize, taken: &[Coord], mut rng: ChaCha8Rng) -> Result<Self, SimError> {
        let starts = random_spawn_cells(map, m, taken, &mut rng)?;
        Self::from_positions(map, starts, rng)
    }

    pub fn from_positions(map: &GridMap, starts: Vec<Coord>, rng: ChaCha8Rng) -> Result<Self, SimError> {
        for s in &starts {
            if !map.is_passable(*s) {
                return Err(GridError::NotPassable(*s).into());
            }
        }
        let mut model = Self {
            walkers: starts
                .into_iter()
                .enumerate()
                .map(|(id, pos)| Walker {
                    id,
                    pos,
                    goal: pos,
                    route: VecDeque::new(),
                })
                .collect(),
            rng,
            cache: DistanceCache::default(),
        };
        for i in 0..model.walkers.len() {
            model.replan(map, i)?;
        }
        Ok(model)
    }

    pub fn walkers(&self) -> &[Walker] {
        &self.walkers
    }

    pub fn positions(&self) -> BTreeMap<AgentId, Coord> {
        self.walkers.iter().map(|w| (w.id, w.pos)).collect()
    }

    fn replan(&mut self, map: &GridMap, i: usize) -> Result<(), GridError> {
        let pos = self.walkers[i].pos;
        let spots = map.task_spots();
        for _ in 0..GOAL_RETRIES {
            let Some(&goal) = spots.choose(&mut self.rng) else {
                break;
            };
            if goal == pos {
                continue;
            }
            if let Some(path) = self.cache.shortest_path(map, pos, goal)? {
                let w = &mut self.walkers[i];
                w.goal = goal;
                w.route = path.into_iter().skip(1).collect();
                return Ok(());
            }
        }
        let w = &mut self.walkers[i];
        w.goal = pos;
        w.route.clear();
        Ok(())
    }

    /// Advance every walker by at most one edge.
    pub fn step(&mut self, map: &GridMap) {
        for i in 0..self.walkers.len() {
            if self.walkers[i].route.is_empty() {
                self.replan(map, i).expect("walker stands on a passable cell");
            }
            let w = &mut self.walkers[i];
            if let Some(next) = w.route.pop_front() {
                w.pos = next;
            }
        }
    }
}

impl UncontrolledWorld for WalkerModel {
    fn positions(&self) -> BTreeMap<AgentId, Coord> {
        WalkerModel::positions(self)
    }

    fn advance(&mut self, map: &GridMap) {
        self.step(map);
    }
}

/// Replays recorded positions; holds the last frame once exhausted.
#[derive(Debug, Clone)]
pub struct TraceWorld {
    frames: Vec<BTreeMap<AgentId, Coord>>,
    at: usize,
}

impl TraceWorld {
    pub fn new(frames: Vec<BTreeMap<AgentId, Coord>>) -> Self {
        assert!(!frames.is_empty(), "trace needs at least one frame");
        Self { frames, at: 0 }
    }
}

impl UncontrolledWorld for TraceWorld {
    fn positions(&self) -> BTreeMap<AgentId, Coord> {
        self.frames[self.at].clone()
    }

    fn advance(&mut self, _map: &GridMap) {
        self.at = (self.at + 1).min(self.frames.len() - 1);
    }
}

/// `positions[t][j]` is agent `j` at timestep `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub traj_id: usize,
    pub positions: Vec<Vec<Coord>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub cal: Vec<usize>,
}

impl Splits {
    /// Contiguous 70/10/10/10 split by index; calibration takes the
    /// remainder.
    pub fn standard(d: usize) -> Self {
        let train = d * 7 / 10;
        let val = d / 10;
        let test = d / 10;
        Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
            cal: (train + val + test..d).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub map: String,
    pub agents: usize,
    pub steps: usize,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub splits: Splits,
}

/// One trajectory: fresh random spawns and goals, `steps` recorded
/// timesteps. Trajectory `traj_id` of a seed is independent of every other.
pub fn rollout(map: &GridMap, m: usize, steps: usize, seed: u64, traj_id: usize) -> Result<Trajectory, SimError> {
    let mut model = WalkerModel::spawn(map, m, &[], stream_rng(seed, traj_id as u64))?;
    let mut positions = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            model.step(map);
        }
        positions.push(model.walkers.iter().map(|w| w.pos).collect());
    }
    Ok(Trajectory { traj_id, positions })
}

pub fn generate_dataset(
    map: &GridMap,
    m: usize,
    d: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryDataset, SimError> {
    if d < 10 {
        return Err(SimError::Parameters(alloc::format!("need at least 10 trajectories, got {d}")));
    }
    if m == 0 || steps == 0 {
        return Err(SimError::Parameters("agent count and length must be positive".into()));
    }
    let trajectories = (0..d)
        .map(|i| rollout(map, m, steps, seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectoryDataset {
        map: map.name().into(),
        agents: m,
        steps,
        seed,
        trajectories,
        splits: Splits::standard(d),
    })
}

/// Anchor timestep for calibration instance `traj_id`, uniform in
/// `[history_len - 1, steps - horizon - 1]`.
pub fn calibration_anchor(
    steps: usize,
    history_len: usize,
    horizon: usize,
    seed: u64,
    traj_id: usize,
) -> Result<usize, SimError> {
    let lo = history_len.max(1) - 1;
    let hi = steps.checked_sub(horizon + 1).filter(|&hi| hi >= lo).ok_or_else(|| {
        SimError::Parameters(alloc::format!(
            "trajectories of {steps} steps are too short for history {history_len} and horizon {horizon}"
        ))
    })?;
    let mut rng = stream_rng(seed ^ 0x5eed_ca1b, traj_id as u64);
    Ok(rng.gen_range(lo..=hi))
}

/// History window and ground truth cut from a trajectory at `anchor`.
pub fn cut_sample(
    traj: &Trajectory,
    anchor: usize,
    history_len: usize,
    horizon: usize,
) -> (ObservationHistory, BTreeMap<AgentId, Vec<Coord>>) {
    let m = traj.positions.first().map_or(0, Vec::len);
    let lo = (anchor + 1).saturating_sub(history_len);
    let tracks = (0..m)
        .map(|j| (j, traj.positions[lo..=anchor].iter().map(|f| f[j]).collect()))
        .collect();
    let actuals = (0..m)
        .map(|j| (j, traj.positions[anchor + 1..=anchor + horizon].iter().map(|f| f[j]).collect()))
        .collect();
    (ObservationHistory::from_tracks(history_len, anchor, tracks), actuals)
}

/// Predictions and ground truth for each trajectory at its random anchor.
pub fn calibration_samples<'a>(
    map: &GridMap,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    predictor: &mut dyn Predictor,
    horizon: usize,
    history_len: usize,
    seed: u64,
) -> Result<Vec<CalibrationSample>, SimError> {
    let mut out = Vec::new();
    for traj in trajectories {
        let anchor = calibration_anchor(traj.len(), history_len, horizon, seed, traj.traj_id)?;
        let (history, actuals) = cut_sample(traj, anchor, history_len, horizon);
        let mut bundle = predictor.predict(&history, map, horizon)?;
        bundle.validate(history.agents())?;
        bundle.clamp(map);
        out.push(CalibrationSample {
            instance: traj.traj_id,
            predictions: bundle.points,
            actuals,
        });
    }
    Ok(out)
}
