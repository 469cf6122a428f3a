//! On-disk formats: solutions, datasets, calibration artifacts, event logs
//! and results tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpsolver_core::conformal::CalibrationArtifact;
use cpsolver_core::cp_solver::EventRecord;
use cpsolver_core::grid::Coord;
use cpsolver_core::mapf::{AgentId, Solution};
use cpsolver_core::sim::{MetricsRecord, Splits, Trajectory, TrajectoryDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub paths: BTreeMap<AgentId, Vec<Coord>>,
    pub cost: usize,
    pub expanded: usize,
    pub runtime_s: f64,
    pub w_final: f64,
}

impl SolutionFile {
    pub fn new(sol: &Solution) -> Self {
        Self {
            paths: sol.paths.iter().map(|p| (p.agent, p.vertices.clone())).collect(),
            cost: sol.cost,
            expanded: sol.stats.expanded,
            runtime_s: sol.stats.runtime_s,
            w_final: sol.stats.w_final,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Sidecar describing a dataset's trajectories file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub map: String,
    pub agents: usize,
    pub steps: usize,
    pub seed: u64,
    pub count: usize,
    pub trajectories: String,
    pub splits: Splits,
}

/// `<stem>.manifest.json` next to `<stem>.jsonl`.
pub fn manifest_path(trajectories: &Path) -> PathBuf {
    trajectories.with_extension("manifest.json")
}

pub fn write_dataset(trajectories: &Path, data: &TrajectoryDataset) -> Result<()> {
    write_jsonl(trajectories, &data.trajectories)?;
    let manifest = DatasetManifest {
        map: data.map.clone(),
        agents: data.agents,
        steps: data.steps,
        seed: data.seed,
        count: data.trajectories.len(),
        trajectories: trajectories
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned(),
        splits: data.splits.clone(),
    };
    write_json(&manifest_path(trajectories), &manifest)
}

/// Reads a dataset from its trajectories file or its manifest.
pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let (manifest_file, trajectories) = if path.to_string_lossy().ends_with(".manifest.json") {
        let m: DatasetManifest = read_json(path)?;
        (path.to_path_buf(), path.with_file_name(&m.trajectories))
    } else {
        (manifest_path(path), path.to_path_buf())
    };
    let m: DatasetManifest = read_json(&manifest_file)?;
    let trajectories: Vec<Trajectory> = read_jsonl(&trajectories)?;
    if trajectories.len() != m.count {
        bail!("manifest lists {} trajectories, file has {}", m.count, trajectories.len());
    }
    for (i, t) in trajectories.iter().enumerate() {
        if t.traj_id != i {
            bail!("trajectory on line {} has id {}", i + 1, t.traj_id);
        }
        if t.positions.len() != m.steps || t.positions.iter().any(|f| f.len() != m.agents) {
            bail!("trajectory {i} does not have {} steps of {} agents", m.steps, m.agents);
        }
    }
    Ok(TrajectoryDataset {
        map: m.map,
        agents: m.agents,
        steps: m.steps,
        seed: m.seed,
        trajectories,
        splits: m.splits,
    })
}

pub fn write_artifact(path: &Path, art: &CalibrationArtifact) -> Result<()> {
    write_json(path, art)
}

pub fn read_artifact(path: &Path) -> Result<CalibrationArtifact> {
    let art: CalibrationArtifact = read_json(path)?;
    if art.alphas.len() != art.horizon || art.radii.len() != art.horizon {
        bail!("{}: alphas and C must have H = {} entries", path.display(), art.horizon);
    }
    if !(art.delta > 0.0 && art.delta < 1.0) {
        bail!("{}: delta {} outside (0, 1)", path.display(), art.delta);
    }
    Ok(art)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    write_jsonl(path, events)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    read_jsonl(path)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub map: String,
    pub kind: String,
    pub n_controlled: usize,
    pub m_uncontrolled: usize,
    pub delta: f64,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub w_hat: usize,
    pub seed: u64,
    pub throughput: f64,
    pub collisions: usize,
    /// 1 when the run had at least one collision.
    pub violations: u8,
    pub runtime_s: f64,
    pub coverage: Option<f64>,
}

impl ResultRow {
    pub fn from_metrics(
        map: &str,
        kind: &str,
        n_controlled: usize,
        m_uncontrolled: usize,
        delta: f64,
        horizon: usize,
        w_hat: usize,
        seed: u64,
        m: &MetricsRecord,
    ) -> Self {
        Self {
            map: map.to_owned(),
            kind: kind.to_owned(),
            n_controlled,
            m_uncontrolled,
            delta,
            horizon,
            w_hat,
            seed,
            throughput: m.throughput,
            collisions: m.collisions,
            violations: u8::from(m.violation()),
            runtime_s: m.runtime_s,
            coverage: m.coverage,
        }
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
