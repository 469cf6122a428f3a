use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use cpsolver::bench::{calibrations_for, lifelong_run, run_bench, simulate_calibration};
use cpsolver::config::{ConfigError, RunConfig, SolveKind, Stage};
use cpsolver::external::{conformance_suite, DEFAULT_STARTUP};
use cpsolver::formats::{
    read_artifact, read_dataset, write_dataset, write_events, write_json, write_results, SolutionFile,
};
use cpsolver::pipeline::{calibrate_dataset, PredictorKind, SystemClock};
use cpsolver_core::conformal::CalibrationArtifact;
use cpsolver_core::cp_solver::{BaselineKind, CpError};
use cpsolver_core::grid::{DistanceCache, GridMap};
use cpsolver_core::mapf::{solve, AgentTask, BeyondHorizon, Clock, Instance, NoClock, SolveError, SolverConfig, SolverMode};
use cpsolver_core::sim::{aggregate, generate_dataset, run_open_loop_episode, ScenarioSetup, SimError};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cpsolver", version, about = "Multi-agent path finding among uncontrolled agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the scenario and dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `bench`; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Zero all wall-clock fields and disable time budgets, so outputs are
    /// byte-identical across runs.
    #[arg(long, global = true)]
    no_timing: bool,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate walker trajectories and write a dataset with its split manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Walkers per trajectory.
        #[arg(long)]
        agents: Option<usize>,
        /// Number of trajectories.
        #[arg(long)]
        count: Option<usize>,
        /// Timesteps per trajectory.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Calibrate a predictor on a dataset's calibration split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Plan once for a scenario and execute the plan.
    Solve {
        #[command(flatten)]
        common: Common,
        /// plain, ignore, obstacle, pred or cp.
        #[arg(long)]
        solver: Option<SolveKind>,
    },
    /// Run one lifelong rolling-horizon mission.
    Lifelong {
        #[command(flatten)]
        common: Common,
        /// ignore, obstacle, pred or cp.
        #[arg(long)]
        kind: Option<BaselineKind>,
    },
    /// Run every baseline over a grid of scenarios and seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Seeds per scenario.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<BaselineKind>>,
        #[arg(long, value_delimiter = ',')]
        sweep_uncontrolled: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_horizon: Option<Vec<usize>>,
    },
    /// Check that an external predictor speaks the prediction protocol.
    CheckPredictor {
        /// Program and arguments, separated by spaces.
        #[arg(long, required = true)]
        predictor_cmd: String,
        #[arg(long, default_value_t = 1000)]
        predictor_deadline_ms: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Built-in map (warehouse-small, warehouse-medium, warehouse-large) or a
    /// MovingAI or JSON map file.
    #[arg(long)]
    map: Option<String>,
    /// constant, astar-goal, goal-posterior or external.
    #[arg(long)]
    predictor: Option<PredictorKind>,
    /// External predictor program and arguments, separated by spaces.
    #[arg(long)]
    predictor_cmd: Option<String>,
    #[arg(long)]
    predictor_deadline_ms: Option<u64>,
    /// Calibration artifact to use instead of calibrating on the fly.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    calibration_trajectories: Option<usize>,
    #[arg(long)]
    n_controlled: Option<usize>,
    #[arg(long)]
    m_uncontrolled: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Prediction horizon and replanning window H.
    #[arg(long)]
    horizon: Option<usize>,
    /// Conflict horizon; defaults to the horizon when only that is given.
    #[arg(long)]
    w_hat: Option<usize>,
    /// Suboptimality bound.
    #[arg(long)]
    w: Option<f64>,
    /// Lifelong mission length.
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    history_len: Option<usize>,
    /// What one-shot plans assume after the horizon: persist or drop.
    #[arg(long)]
    beyond: Option<String>,
    #[arg(long)]
    time_budget_s: Option<f64>,
    #[arg(long)]
    expansion_budget: Option<usize>,
    #[arg(long)]
    max_escalations: Option<u32>,
    #[arg(long)]
    exclusion_cap: Option<usize>,
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn split_command(cmd: &str) -> Vec<String> {
    cmd.split_whitespace().map(str::to_owned).collect()
}

impl Common {
    fn apply(self, cfg: &mut RunConfig) -> Result<(), ConfigError> {
        let sc = &mut cfg.scenario;
        if let Some(v) = self.map {
            cfg.map = Some(v);
        }
        if let Some(v) = self.predictor {
            cfg.predictor = v;
        }
        if let Some(v) = self.predictor_cmd {
            cfg.predictor_cmd = split_command(&v);
            if self.predictor.is_none() {
                cfg.predictor = PredictorKind::External;
            }
        }
        if let Some(v) = self.predictor_deadline_ms {
            cfg.predictor_deadline_ms = v;
        }
        if let Some(v) = self.calibration {
            cfg.calibration = Some(v);
        }
        if let Some(v) = self.calibration_trajectories {
            cfg.calibration_trajectories = v;
        }
        if let Some(v) = self.n_controlled {
            sc.n_controlled = v;
        }
        if let Some(v) = self.m_uncontrolled {
            sc.m_uncontrolled = v;
        }
        if let Some(v) = self.delta {
            sc.delta = v;
        }
        if let Some(v) = self.horizon {
            sc.horizon = v;
            if self.w_hat.is_none() {
                sc.conflict_horizon = v;
            }
        }
        if let Some(v) = self.w_hat {
            sc.conflict_horizon = v;
        }
        if let Some(v) = self.w {
            sc.w = v;
        }
        if let Some(v) = self.total_steps {
            sc.total_steps = v;
        }
        if let Some(v) = self.history_len {
            sc.history_len = v;
        }
        if let Some(v) = self.beyond {
            sc.beyond = match v.as_str() {
                "persist" => BeyondHorizon::Persist,
                "drop" => BeyondHorizon::Drop,
                _ => {
                    return Err(ConfigError {
                        flag: "--beyond",
                        msg: format!("expected persist or drop, got {v:?}"),
                    })
                }
            };
        }
        if let Some(v) = self.time_budget_s {
            sc.time_budget_s = v;
        }
        if let Some(v) = self.expansion_budget {
            sc.expansion_budget = Some(v);
        }
        if let Some(v) = self.max_escalations {
            sc.max_escalations = Some(v);
        }
        if let Some(v) = self.exclusion_cap {
            sc.exclusion_cap = v;
        }
        Ok(())
    }
}

struct Ctx {
    out: PathBuf,
    jobs: usize,
    timing: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn system_clock(&self) -> SystemClock {
        SystemClock::new()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    let ctx = Ctx {
        out: cli.out.clone(),
        jobs: cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        timing: !cli.no_timing,
    };
    if ctx.jobs == 0 {
        return Err(ConfigError {
            flag: "--jobs",
            msg: "must be positive".into(),
        }
        .into());
    }
    let prepare = |ctx: &Ctx| -> Outcome {
        std::fs::create_dir_all(&ctx.out)
            .with_context(|| format!("creating {}", ctx.out.display()))
            .map_err(Failure::Runtime)
    };
    match cli.command {
        Command::GenData {
            common,
            agents,
            count,
            steps,
        } => {
            common.apply(&mut cfg)?;
            if let Some(v) = agents {
                cfg.agents = v;
            }
            if let Some(v) = count {
                cfg.count = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            let map = cfg.validate(Stage::GenData)?;
            prepare(&ctx)?;
            gen_data(&ctx, &cfg, &map)
        }
        Command::Calibrate { common, dataset } => {
            common.apply(&mut cfg)?;
            if let Some(v) = dataset {
                cfg.dataset = Some(v);
            }
            let map = cfg.validate(Stage::Calibrate)?;
            prepare(&ctx)?;
            calibrate(&ctx, &cfg, &map)
        }
        Command::Solve { common, solver } => {
            common.apply(&mut cfg)?;
            if let Some(v) = solver {
                cfg.solver = v;
            }
            let map = cfg.validate(Stage::Solve)?;
            let cal = load_calibration(&cfg, cfg.scenario.horizon)?;
            prepare(&ctx)?;
            solve_once(&ctx, &cfg, &map, cal)
        }
        Command::Lifelong { common, kind } => {
            common.apply(&mut cfg)?;
            if let Some(v) = kind {
                cfg.kind = v;
            }
            let map = cfg.validate(Stage::Lifelong)?;
            let cal = load_calibration(&cfg, cfg.scenario.horizon)?;
            prepare(&ctx)?;
            lifelong(&ctx, &cfg, &map, cal)
        }
        Command::Bench {
            common,
            runs,
            kinds,
            sweep_uncontrolled,
            sweep_horizon,
        } => {
            common.apply(&mut cfg)?;
            if let Some(v) = runs {
                cfg.runs = v;
            }
            if let Some(v) = kinds {
                cfg.kinds = v;
            }
            if let Some(v) = sweep_uncontrolled {
                cfg.sweep_uncontrolled = v;
            }
            if let Some(v) = sweep_horizon {
                cfg.sweep_horizon = v;
            }
            let map = cfg.validate(Stage::Bench)?;
            let scenarios = cfg.bench_scenarios();
            let loaded = match &cfg.calibration {
                Some(_) => {
                    let horizons: Vec<usize> = scenarios.iter().map(|s| s.horizon).collect();
                    let h = horizons[0];
                    if horizons.iter().any(|&x| x != h) {
                        return Err(ConfigError {
                            flag: "--calibration",
                            msg: "one artifact cannot serve several swept horizons".into(),
                        }
                        .into());
                    }
                    load_calibration(&cfg, h)?
                }
                None => None,
            };
            prepare(&ctx)?;
            bench(&ctx, &cfg, &map, loaded)
        }
        Command::CheckPredictor {
            predictor_cmd,
            predictor_deadline_ms,
        } => {
            let command = split_command(&predictor_cmd);
            if command.is_empty() {
                return Err(ConfigError {
                    flag: "--predictor-cmd",
                    msg: "empty command".into(),
                }
                .into());
            }
            let checks = conformance_suite(&command, Duration::from_millis(predictor_deadline_ms), DEFAULT_STARTUP);
            let mut failed = 0;
            for c in &checks {
                if c.passed {
                    println!("PASS {}", c.name);
                } else {
                    failed += 1;
                    println!("FAIL {}: {}", c.name, c.detail);
                }
            }
            if failed > 0 {
                return Err(anyhow!("{failed} of {} protocol checks failed", checks.len()).into());
            }
            Ok(())
        }
    }
}

fn load_calibration(cfg: &RunConfig, horizon: usize) -> Result<Option<CalibrationArtifact>, Failure> {
    let Some(path) = &cfg.calibration else {
        return Ok(None);
    };
    let art = read_artifact(path).map_err(|e| ConfigError {
        flag: "--calibration",
        msg: format!("{e:#}"),
    })?;
    if art.horizon != horizon {
        return Err(ConfigError {
            flag: "--calibration",
            msg: format!("artifact has H = {}, the run uses H = {horizon}", art.horizon),
        }
        .into());
    }
    if (art.delta - cfg.scenario.delta).abs() > 1e-12 {
        log::warn!("artifact was calibrated at delta = {}, the run asks for {}", art.delta, cfg.scenario.delta);
    }
    Ok(Some(art))
}

/// The loaded artifact, or a fresh calibration when CP needs one.
fn calibration_for_run(
    cfg: &RunConfig,
    map: &GridMap,
    loaded: Option<CalibrationArtifact>,
    needed: bool,
) -> anyhow::Result<Option<CalibrationArtifact>> {
    if loaded.is_some() || !needed {
        return Ok(loaded);
    }
    let sc = &cfg.scenario;
    let report = simulate_calibration(
        map,
        &cfg.predictor_spec(),
        sc.m_uncontrolled,
        sc.horizon,
        sc.delta,
        sc.history_len,
        cfg.calibration_trajectories,
        sc.seed ^ 0xca1,
    )?;
    log::info!("calibrated on the fly: C = {:?}", report.artifact.radii);
    Ok(Some(report.artifact))
}

fn gen_data(ctx: &Ctx, cfg: &RunConfig, map: &GridMap) -> Outcome {
    let data = generate_dataset(map, cfg.agents, cfg.count, cfg.steps, cfg.scenario.seed).map_err(anyhow::Error::from)?;
    let path = ctx.path("dataset.jsonl");
    write_dataset(&path, &data)?;
    println!(
        "wrote {} trajectories of {} agents x {} steps to {}",
        data.trajectories.len(),
        data.agents,
        data.steps,
        path.display()
    );
    Ok(())
}

fn calibrate(ctx: &Ctx, cfg: &RunConfig, map: &GridMap) -> Outcome {
    let path = cfg.dataset.as_ref().expect("validated");
    let data = read_dataset(path).map_err(|e| ConfigError {
        flag: "--dataset",
        msg: format!("{e:#}"),
    })?;
    if data.map != map.name() {
        log::warn!("dataset was generated on map {}, calibrating on {}", data.map, map.name());
    }
    let sc = &cfg.scenario;
    let mut predictor = cfg.predictor_spec().open()?;
    let report = calibrate_dataset(map, &data, predictor.as_mut(), sc.horizon, sc.delta, sc.history_len, sc.seed)
        .map_err(anyhow::Error::from)?;
    let out = ctx.path("calibration.json");
    write_json(&out, &report.artifact)?;
    let art = &report.artifact;
    println!("cal2 = {}", art.cal2_size);
    println!("p = {}", report.p);
    println!("alphas = {:?}", art.alphas);
    println!("C = {:?}", art.radii);
    match report.test_coverage {
        Some(c) => println!("test coverage = {c:.4} ({} instances)", report.test_size),
        None => println!("test coverage = n/a (empty test split)"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    command: &'a str,
    error: &'static str,
    message: String,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    let cp = match e.downcast_ref::<SimError>() {
        Some(SimError::Cp(cp)) => Some(cp),
        Some(SimError::Prediction(_)) => return "prediction",
        Some(SimError::Parameters(_)) => return "parameters",
        Some(_) => return "simulation",
        None => e.downcast_ref::<CpError>(),
    };
    let solve = match cp {
        Some(CpError::Solve(s)) => Some(s),
        Some(CpError::Prediction(_)) => return "prediction",
        Some(CpError::Deadlock(_)) => return "deadlock",
        Some(_) => return "planning",
        None => e.downcast_ref::<SolveError>(),
    };
    match solve {
        Some(SolveError::SearchExhausted { .. }) => "search-exhausted",
        Some(SolveError::BudgetExhausted { .. }) => "budget-exhausted",
        Some(SolveError::Unsolvable { .. }) => "unsolvable",
        Some(SolveError::InvalidInstance(_)) => "invalid-instance",
        Some(SolveError::Grid(_)) => "grid",
        None => "runtime",
    }
}

fn record_error(ctx: &Ctx, command: &str, e: anyhow::Error) -> Failure {
    let record = ErrorRecord {
        command,
        error: error_kind(&e),
        message: format!("{e:#}"),
    };
    if let Err(w) = write_json(&ctx.path("error.json"), &record) {
        log::error!("could not write the error record: {w:#}");
    }
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
    Failure::Runtime(e)
}

fn solve_once(ctx: &Ctx, cfg: &RunConfig, map: &GridMap, loaded: Option<CalibrationArtifact>) -> Outcome {
    let system = ctx.system_clock();
    let clock: &dyn Clock = if ctx.timing { &system } else { &NoClock };
    let sc = &cfg.scenario;
    let result = (|| -> anyhow::Result<SolutionFile> {
        match cfg.solver.baseline() {
            None => {
                let setup = ScenarioSetup::new(map, sc)?;
                let tasks: Vec<AgentTask> = setup
                    .starts
                    .iter()
                    .zip(&setup.goals)
                    .enumerate()
                    .map(|(i, (&s, &g))| AgentTask::new(i, s, g))
                    .collect();
                let obstacles = cpsolver_core::mapf::DynamicObstacleSet::empty(setup.history.t());
                let instance = Instance {
                    map,
                    agents: &tasks,
                    t0: setup.history.t(),
                    obstacles: &obstacles,
                    predictions: &[],
                };
                let mut solver = SolverConfig::new(SolverMode::Ecbs { w: sc.w });
                solver.time_budget_s = sc.time_budget_s;
                solver.expansion_budget = sc.expansion_budget;
                solver.max_escalations = sc.max_escalations;
                let sol = solve(&instance, &solver, clock, &mut DistanceCache::default())?;
                Ok(SolutionFile::new(&sol))
            }
            Some(kind) => {
                let cal = calibration_for_run(cfg, map, loaded, kind == BaselineKind::Cp)?;
                let mut predictor = cfg.predictor_spec().open()?;
                let ep = run_open_loop_episode(kind, map, sc, predictor.as_mut(), cal.as_ref(), clock)?;
                let mut metrics = ep.metrics;
                if !ctx.timing {
                    metrics.strip_timing();
                }
                write_json(&ctx.path("metrics.json"), &metrics)?;
                Ok(SolutionFile::new(&ep.plan.solution))
            }
        }
    })();
    let mut file = result.map_err(|e| record_error(ctx, "solve", e))?;
    if !ctx.timing {
        file.runtime_s = 0.0;
    }
    let path = ctx.path("solution.json");
    write_json(&path, &file)?;
    println!(
        "{}: cost {} expanded {} w_final {} -> {}",
        cfg.solver,
        file.cost,
        file.expanded,
        file.w_final,
        path.display()
    );
    Ok(())
}

fn lifelong(ctx: &Ctx, cfg: &RunConfig, map: &GridMap, loaded: Option<CalibrationArtifact>) -> Outcome {
    let system = ctx.system_clock();
    let clock: &dyn Clock = if ctx.timing { &system } else { &NoClock };
    let result = calibration_for_run(cfg, map, loaded, cfg.kind == BaselineKind::Cp)
        .and_then(|cal| lifelong_run(cfg.kind, map, &cfg.scenario, &cfg.predictor_spec(), cal.as_ref(), clock));
    let out = result.map_err(|e| record_error(ctx, "lifelong", e))?;
    let mut metrics = out.metrics;
    if !ctx.timing {
        metrics.strip_timing();
    }
    write_events(&ctx.path("events.jsonl"), &out.events)?;
    write_json(&ctx.path("metrics.json"), &metrics)?;
    println!(
        "{}: throughput {:.4} goals {} collisions {} violation windows {}/{}",
        cfg.kind, metrics.throughput, metrics.goals, metrics.collisions, metrics.violation_windows, metrics.windows
    );
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    kind: String,
    m_uncontrolled: usize,
    #[serde(rename = "H")]
    horizon: usize,
    w_hat: usize,
    #[serde(flatten)]
    summary: cpsolver_core::sim::Summary,
}

fn bench(ctx: &Ctx, cfg: &RunConfig, map: &GridMap, loaded: Option<CalibrationArtifact>) -> Outcome {
    let scenarios = cfg.bench_scenarios();
    let predictor = cfg.predictor_spec();
    let calibrations = match loaded {
        Some(art) => scenarios
            .iter()
            .map(|s| ((s.m_uncontrolled, s.horizon, s.delta.to_bits()), art.clone()))
            .collect(),
        None if cfg.kinds.contains(&BaselineKind::Cp) => {
            calibrations_for(map, &predictor, &scenarios, cfg.calibration_trajectories)?
        }
        None => BTreeMap::new(),
    };
    let outcome = run_bench(map, &scenarios, &cfg.kinds, &predictor, &calibrations, ctx.jobs, ctx.timing)?;
    let csv_path = ctx.path("results.csv");
    write_results(&csv_path, &outcome.rows)?;

    let keyed: Vec<_> = outcome
        .rows
        .iter()
        .map(|r| {
            let mut m = cpsolver_core::sim::MetricsRecord::empty(r.n_controlled);
            m.throughput = r.throughput;
            m.collisions = r.collisions;
            m.runtime_s = r.runtime_s;
            m.coverage = r.coverage;
            ((r.kind.clone(), r.m_uncontrolled, r.horizon, r.w_hat), m)
        })
        .collect();
    let summary: Vec<SummaryRow> = aggregate(&keyed)
        .into_iter()
        .map(|((kind, m, h, w_hat), summary)| SummaryRow {
            kind,
            m_uncontrolled: m,
            horizon: h,
            w_hat,
            summary,
        })
        .collect();
    write_json(&ctx.path("summary.json"), &summary)?;
    for s in &summary {
        println!(
            "{:<8} m={:<2} H={:<2} runs {:>3}  throughput {:.4}  collisions {:.2}  violation rate {:.2}",
            s.kind,
            s.m_uncontrolled,
            s.horizon,
            s.summary.runs,
            s.summary.throughput.mean,
            s.summary.collisions.mean,
            s.summary.violation_rate
        );
    }
    println!("wrote {} rows to {}", outcome.rows.len(), csv_path.display());
    if !outcome.failures.is_empty() {
        return Err(anyhow!("{} of {} runs failed", outcome.failures.len(), outcome.failures.len() + outcome.rows.len()).into());
    }
    Ok(())
}
