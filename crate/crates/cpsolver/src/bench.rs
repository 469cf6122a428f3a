//! Baseline sweeps over seeds and scenarios, fanned out over a thread pool.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use cpsolver_core::conformal::CalibrationArtifact;
use cpsolver_core::cp_solver::{BaselineKind, ClosedLoopOutcome, CpError};
use cpsolver_core::grid::GridMap;
use cpsolver_core::mapf::{Clock, NoClock};
use cpsolver_core::sim::{rollout, run_baseline, Scenario, SimError, Splits, TrajectoryDataset};
use rayon::prelude::*;

use crate::formats::ResultRow;
use crate::pipeline::{calibrate_dataset, CalibrationReport, PredictorSpec, SystemClock};

/// Trajectory length for on-the-fly calibration.
pub const CALIBRATION_STEPS: usize = 64;

/// Calibrates `predictor` for `m` walkers and horizon `horizon` on `count`
/// freshly simulated trajectories, all of them in the calibration split.
#[allow(clippy::too_many_arguments)]
pub fn simulate_calibration(
    map: &GridMap,
    predictor: &PredictorSpec,
    m: usize,
    horizon: usize,
    delta: f64,
    history_len: usize,
    count: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    let steps = CALIBRATION_STEPS.max(history_len + horizon + 1);
    let trajectories = (0..count)
        .map(|i| rollout(map, m.max(1), steps, seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    let data = TrajectoryDataset {
        map: map.name().to_owned(),
        agents: m.max(1),
        steps,
        seed,
        trajectories,
        splits: Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            cal: (0..count).collect(),
        },
    };
    let mut p = predictor.open()?;
    Ok(calibrate_dataset(map, &data, p.as_mut(), horizon, delta, history_len, seed)?)
}

/// Seed offset that keeps calibration trajectories apart from the
/// benchmark worlds.
const CALIBRATION_SEED: u64 = 0xca1_1b8a7e;

/// One artifact per distinct (m, H, δ) among `scenarios`, keyed by
/// `(m, H, δ.to_bits())`.
pub fn calibrations_for(
    map: &GridMap,
    predictor: &PredictorSpec,
    scenarios: &[Scenario],
    count: usize,
) -> Result<BTreeMap<(usize, usize, u64), CalibrationArtifact>> {
    let mut out = BTreeMap::new();
    for sc in scenarios {
        let key = (sc.m_uncontrolled, sc.horizon, sc.delta.to_bits());
        if out.contains_key(&key) {
            continue;
        }
        let report = simulate_calibration(
            map,
            predictor,
            sc.m_uncontrolled,
            sc.horizon,
            sc.delta,
            sc.history_len,
            count,
            CALIBRATION_SEED ^ sc.m_uncontrolled as u64,
        )
        .with_context(|| format!("calibrating m = {}, H = {}", sc.m_uncontrolled, sc.horizon))?;
        log::info!(
            "calibrated m = {} H = {}: C = {:?}",
            sc.m_uncontrolled,
            sc.horizon,
            report.artifact.radii
        );
        out.insert(key, report.artifact);
    }
    Ok(out)
}

/// A lifelong run; a deadlock still yields the metrics gathered until it.
pub fn lifelong_run(
    kind: BaselineKind,
    map: &GridMap,
    scenario: &Scenario,
    predictor: &PredictorSpec,
    calibration: Option<&CalibrationArtifact>,
    clock: &dyn Clock,
) -> Result<ClosedLoopOutcome> {
    let mut p = predictor.open()?;
    match run_baseline(kind, map, scenario, p.as_mut(), calibration, clock) {
        Ok(out) => Ok(out),
        Err(SimError::Cp(CpError::Deadlock(report))) => {
            log::warn!(
                "{kind} seed {}: agent {} excluded for {} windows at t = {}, run cut short",
                scenario.seed,
                report.agent,
                report.windows,
                report.t
            );
            Ok(ClosedLoopOutcome {
                metrics: report.metrics,
                events: report.events,
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub struct BenchOutcome {
    pub rows: Vec<ResultRow>,
    /// Runs that failed, with the reason; their rows are missing.
    pub failures: Vec<(BaselineKind, Scenario, String)>,
}

/// Runs every kind on every scenario on `jobs` threads. Rows come back in
/// scenario order, kinds in the order given, whatever the scheduling.
pub fn run_bench(
    map: &GridMap,
    scenarios: &[Scenario],
    kinds: &[BaselineKind],
    predictor: &PredictorSpec,
    calibrations: &BTreeMap<(usize, usize, u64), CalibrationArtifact>,
    jobs: usize,
    timing: bool,
) -> Result<BenchOutcome> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let tasks: Vec<(&Scenario, BaselineKind)> =
        scenarios.iter().flat_map(|sc| kinds.iter().map(move |&k| (sc, k))).collect();
    let results: Vec<Result<ResultRow, String>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(sc, kind)| {
                let cal = calibrations.get(&(sc.m_uncontrolled, sc.horizon, sc.delta.to_bits()));
                let system = SystemClock::new();
                let clock: &dyn Clock = if timing { &system } else { &NoClock };
                let out = lifelong_run(kind, map, sc, predictor, cal, clock).map_err(|e| format!("{e:#}"))?;
                let mut metrics = out.metrics;
                if !timing {
                    metrics.strip_timing();
                }
                Ok(ResultRow::from_metrics(
                    map.name(),
                    kind.as_str(),
                    sc.n_controlled,
                    sc.m_uncontrolled,
                    sc.delta,
                    sc.horizon,
                    sc.conflict_horizon,
                    sc.seed,
                    &metrics,
                ))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((sc, kind), r) in tasks.into_iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("{kind} seed {} m = {} H = {}: {e}", sc.seed, sc.m_uncontrolled, sc.horizon);
                failures.push((kind, sc.clone(), e));
            }
        }
    }
    Ok(BenchOutcome { rows, failures })
}
