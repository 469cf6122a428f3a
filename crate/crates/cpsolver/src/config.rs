//! Run configuration: a JSON file, overridden field by field by flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use cpsolver_core::cp_solver::BaselineKind;
use cpsolver_core::grid::GridMap;
use cpsolver_core::sim::Scenario;
use serde::{Deserialize, Serialize};

use crate::mapio::load_map;
use crate::pipeline::{PredictorKind, PredictorSpec};

/// A configuration problem, reported before any computation starts. `flag`
/// names the option to fix.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{flag}: {msg}")]
pub struct ConfigError {
    pub flag: &'static str,
    pub msg: String,
}

fn bad(flag: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError { flag, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Calibrate,
    Solve,
    Lifelong,
    Bench,
}

/// What `solve` plans against: one of the baselines, or plain ECBS that
/// knows nothing about uncontrolled agents at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveKind {
    Plain,
    Ignore,
    Obstacle,
    Pred,
    Cp,
}

impl SolveKind {
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            SolveKind::Plain => None,
            SolveKind::Ignore => Some(BaselineKind::Ignore),
            SolveKind::Obstacle => Some(BaselineKind::Obstacle),
            SolveKind::Pred => Some(BaselineKind::Pred),
            SolveKind::Cp => Some(BaselineKind::Cp),
        }
    }
}

impl fmt::Display for SolveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.baseline() {
            Some(b) => write!(f, "{b}"),
            None => f.write_str("PLAIN"),
        }
    }
}

impl FromStr for SolveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("plain") {
            return Ok(SolveKind::Plain);
        }
        let b: BaselineKind = s.parse()?;
        Ok(match b {
            BaselineKind::Ignore => SolveKind::Ignore,
            BaselineKind::Obstacle => SolveKind::Obstacle,
            BaselineKind::Pred => SolveKind::Pred,
            BaselineKind::Cp => SolveKind::Cp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in map name or map file.
    pub map: Option<String>,
    pub dataset: Option<PathBuf>,
    /// Calibration artifact. Without one, CP runs calibrate on fresh
    /// simulated trajectories first.
    pub calibration: Option<PathBuf>,
    pub predictor: PredictorKind,
    /// Program and arguments of an external predictor.
    pub predictor_cmd: Vec<String>,
    pub predictor_deadline_ms: u64,
    pub scenario: Scenario,
    /// `gen-data`: walkers per trajectory, trajectories, steps each.
    pub agents: usize,
    pub count: usize,
    pub steps: usize,
    /// Trajectories simulated for an on-the-fly calibration; half of them
    /// end up in `cal2`.
    pub calibration_trajectories: usize,
    /// What `solve` plans against.
    pub solver: SolveKind,
    /// The baseline `lifelong` runs.
    pub kind: BaselineKind,
    /// `bench`: seeds per scenario, starting at the scenario seed.
    pub runs: usize,
    pub kinds: Vec<BaselineKind>,
    /// `bench`: uncontrolled counts to sweep; empty keeps the scenario's.
    pub sweep_uncontrolled: Vec<usize>,
    /// `bench`: horizons to sweep, each with `ŵ = H`; empty keeps the
    /// scenario's.
    pub sweep_horizon: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            map: None,
            dataset: None,
            calibration: None,
            predictor: PredictorKind::AstarGoal,
            predictor_cmd: Vec::new(),
            predictor_deadline_ms: 1000,
            scenario: Scenario::default(),
            agents: 4,
            count: 500,
            steps: 64,
            calibration_trajectories: 398,
            solver: SolveKind::Cp,
            kind: BaselineKind::Cp,
            runs: 3,
            kinds: BaselineKind::ALL.to_vec(),
            sweep_uncontrolled: Vec::new(),
            sweep_horizon: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| bad("--config", format!("{}: {e}", path.display())))
    }

    pub fn predictor_spec(&self) -> PredictorSpec {
        PredictorSpec {
            kind: self.predictor,
            command: self.predictor_cmd.clone(),
            deadline: Duration::from_millis(self.predictor_deadline_ms),
        }
    }

    /// Checks everything `stage` needs and loads the map.
    pub fn validate(&self, stage: Stage) -> Result<GridMap, ConfigError> {
        let name = self.map.as_deref().ok_or_else(|| bad("--map", "a map is required"))?;
        let map = load_map(name).map_err(|e| bad("--map", e.to_string()))?;
        if let Some(p) = &self.calibration {
            if !p.is_file() {
                return Err(bad("--calibration", format!("{} does not exist", p.display())));
            }
        }
        if self.predictor == PredictorKind::External && self.predictor_cmd.is_empty() {
            return Err(bad("--predictor-cmd", "the external predictor needs a command"));
        }
        if self.predictor_deadline_ms == 0 {
            return Err(bad("--predictor-deadline-ms", "must be positive"));
        }
        let sc = &self.scenario;
        let scenario_flag = |msg: String| {
            let flag = if msg.contains("delta") {
                "--delta"
            } else if msg.contains("w_hat") {
                "--w-hat"
            } else if msg.contains("w must") {
                "--w"
            } else if msg.contains("history") {
                "--history-len"
            } else {
                "--horizon"
            };
            bad(flag, msg)
        };
        sc.validate().map_err(|e| scenario_flag(e.to_string()))?;
        match stage {
            Stage::GenData => {
                if self.count < 10 {
                    return Err(bad("--count", "need at least 10 trajectories"));
                }
                if self.agents == 0 {
                    return Err(bad("--agents", "must be positive"));
                }
                if self.steps < sc.history_len + sc.horizon + 1 {
                    return Err(bad("--steps", "too short for the history length plus the horizon"));
                }
            }
            Stage::Calibrate => match &self.dataset {
                None => return Err(bad("--dataset", "a dataset is required")),
                Some(p) if !p.is_file() => return Err(bad("--dataset", format!("{} does not exist", p.display()))),
                Some(_) => {}
            },
            Stage::Solve => {}
            Stage::Lifelong | Stage::Bench => {
                // Swept horizons round the mission length down instead.
                let swept = stage == Stage::Bench && !self.sweep_horizon.is_empty();
                if sc.total_steps == 0 || (!swept && !sc.total_steps.is_multiple_of(sc.horizon)) {
                    return Err(bad("--total-steps", "must be a positive multiple of the horizon"));
                }
            }
        }
        if stage == Stage::Bench {
            if self.runs == 0 {
                return Err(bad("--runs", "must be positive"));
            }
            if self.kinds.is_empty() {
                return Err(bad("--kinds", "at least one baseline is required"));
            }
            if self.sweep_horizon.contains(&0) {
                return Err(bad("--sweep-horizon", "horizons must be positive"));
            }
            if !self.sweep_horizon.is_empty() && sc.total_steps < *self.sweep_horizon.iter().max().unwrap() {
                return Err(bad("--total-steps", "shorter than the largest swept horizon"));
            }
        }
        if self.calibration.is_none() && self.calibration_trajectories < 20 {
            return Err(bad("--calibration-trajectories", "need at least 20"));
        }
        Ok(map)
    }

    /// The scenario grid of a benchmark: every swept (m, H) at each of
    /// `runs` consecutive seeds.
    pub fn bench_scenarios(&self) -> Vec<Scenario> {
        let base = &self.scenario;
        let ms = if self.sweep_uncontrolled.is_empty() {
            vec![base.m_uncontrolled]
        } else {
            self.sweep_uncontrolled.clone()
        };
        let hs: Vec<(usize, usize)> = if self.sweep_horizon.is_empty() {
            vec![(base.horizon, base.conflict_horizon)]
        } else {
            self.sweep_horizon.iter().map(|&h| (h, h)).collect()
        };
        let mut out = Vec::new();
        for &m in &ms {
            for &(h, w_hat) in &hs {
                for i in 0..self.runs as u64 {
                    out.push(Scenario {
                        m_uncontrolled: m,
                        horizon: h,
                        conflict_horizon: w_hat,
                        total_steps: base.total_steps / h * h,
                        seed: base.seed + i,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}
