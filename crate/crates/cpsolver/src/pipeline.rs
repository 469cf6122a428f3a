//! Glue between the core and the outside world: wall clocks, predictor
//! selection and the calibration batch step.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use cpsolver_core::conformal::{
    conformal_setup, empirical_coverage, score_calibration_set, AlphaRoutine, CalibrationArtifact, QuantileFallback,
};
use cpsolver_core::grid::GridMap;
use cpsolver_core::mapf::Clock;
use cpsolver_core::prediction::{AStarGoalPredictor, ConstantPredictor, GoalPosteriorPredictor, Predictor};
use cpsolver_core::sim::{calibration_samples, SimError, TrajectoryDataset};
use serde::{Deserialize, Serialize};

use crate::external::{ExternalPredictor, DEFAULT_STARTUP};

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Constant,
    AstarGoal,
    GoalPosterior,
    External,
}

impl PredictorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Constant => "constant",
            PredictorKind::AstarGoal => "astar-goal",
            PredictorKind::GoalPosterior => "goal-posterior",
            PredictorKind::External => "external",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(PredictorKind::Constant),
            "astar-goal" => Ok(PredictorKind::AstarGoal),
            "goal-posterior" => Ok(PredictorKind::GoalPosterior),
            "external" => Ok(PredictorKind::External),
            other => Err(format!(
                "unknown predictor {other:?} (constant, astar-goal, goal-posterior, external)"
            )),
        }
    }
}

/// Everything needed to open a predictor. Each run opens its own, so an
/// external predictor gets one process per concurrent run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub command: Vec<String>,
    pub deadline: Duration,
}

impl PredictorSpec {
    pub fn builtin(kind: PredictorKind) -> Self {
        Self {
            kind,
            command: Vec::new(),
            deadline: crate::external::DEFAULT_DEADLINE,
        }
    }

    pub fn open(&self) -> anyhow::Result<Box<dyn Predictor + Send>> {
        Ok(match self.kind {
            PredictorKind::Constant => Box::new(ConstantPredictor),
            PredictorKind::AstarGoal => Box::new(AStarGoalPredictor::new()),
            PredictorKind::GoalPosterior => Box::new(GoalPosteriorPredictor::new()),
            PredictorKind::External => Box::new(ExternalPredictor::spawn(&self.command, self.deadline, DEFAULT_STARTUP)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub artifact: CalibrationArtifact,
    /// Rank of the selected score among the `cal2` scores plus infinity.
    pub p: usize,
    /// Joint coverage on the test split; `None` when it is empty.
    pub test_coverage: Option<f64>,
    pub test_size: usize,
}

/// Predicts on the calibration split, fits weights on its first half and
/// calibrates on the second, then measures joint coverage on the test split.
pub fn calibrate_dataset(
    map: &GridMap,
    data: &TrajectoryDataset,
    predictor: &mut dyn Predictor,
    horizon: usize,
    delta: f64,
    history_len: usize,
    seed: u64,
) -> Result<CalibrationReport, SimError> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| &data.trajectories[i]).collect::<Vec<_>>();
    let cal = calibration_samples(map, pick(&data.splits.cal), predictor, horizon, history_len, seed)?;
    let records = score_calibration_set(&cal, horizon)?;
    let routine = QuantileFallback;
    let (alphas, intervals) = conformal_setup(&records, delta, &routine)?;
    let test = calibration_samples(map, pick(&data.splits.test), predictor, horizon, history_len, seed)?;
    let test_records = score_calibration_set(&test, horizon)?;
    let test_coverage = (!test_records.is_empty()).then(|| empirical_coverage(&test_records, &intervals));
    let mut artifact = CalibrationArtifact::new(&alphas, &intervals, routine.name());
    artifact.map = Some(map.name().to_owned());
    artifact.predictor = Some(predictor.name().to_owned());
    artifact.uncontrolled = Some(data.agents);
    Ok(CalibrationReport {
        artifact,
        p: intervals.p,
        test_coverage,
        test_size: test_records.len(),
    })
}
