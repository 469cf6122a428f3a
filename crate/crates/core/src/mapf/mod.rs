//! Conflict/constraint model and the constraint-tree search (CBS, ECBS and
//! the uncontrolled-agent-aware ECBS variant).

mod conflict;
mod high_level;
mod low_level;
mod obstacles;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::grid::Coord;

pub use conflict::{
    classify_conflict, count_conflicts, detect_first_conflict, Conflict, ConflictKind, Party,
};
pub use high_level::{solve, AgentTask, Instance, SolveError, SolveStats, Solution, SolverConfig, SolverMode};
pub use low_level::{low_level_search, LowLevelError, LowLevelQuery, LowLevelResult};
pub use obstacles::{BeyondHorizon, DynamicObstacleSet};

pub type AgentId = usize;

/// Monotonic time source in seconds. The core never reads a clock itself.
pub trait Clock {
    fn now_s(&self) -> f64;
}

/// A clock that never advances: runtimes read as zero and time budgets never
/// trip. Used for deterministic runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_s(&self) -> f64 {
        0.0
    }
}

/// Time-indexed vertex sequence: `vertices[i]` is the position at `t0 + i`.
/// Outside its range the path is padded with its first/last vertex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    pub agent: AgentId,
    pub t0: usize,
    pub vertices: Vec<Coord>,
}

impl Path {
    pub fn new(agent: AgentId, t0: usize, vertices: Vec<Coord>) -> Self {
        assert!(!vertices.is_empty(), "path needs at least one vertex");
        Self { agent, t0, vertices }
    }

    /// Last timestep with an explicit vertex.
    pub fn end_time(&self) -> usize {
        self.t0 + self.vertices.len() - 1
    }

    pub fn first(&self) -> Coord {
        self.vertices[0]
    }

    pub fn last(&self) -> Coord {
        *self.vertices.last().expect("non-empty")
    }

    /// Position at `t`, padded outside the explicit range.
    pub fn at(&self, t: usize) -> Coord {
        if t <= self.t0 {
            self.vertices[0]
        } else {
            let i = (t - self.t0).min(self.vertices.len() - 1);
            self.vertices[i]
        }
    }

    /// Service time: edges traversed up to the final arrival at the last
    /// vertex. Trailing waits at the end are not counted.
    pub fn cost(&self) -> usize {
        let last = self.last();
        let mut n = self.vertices.len() - 1;
        while n > 0 && self.vertices[n - 1] == last {
            n -= 1;
        }
        n
    }

    /// Every consecutive pair is a wait or a unit move.
    pub fn is_contiguous(&self) -> bool {
        self.vertices
            .windows(2)
            .all(|w| w[0] == w[1] || w[0].is_adjacent(w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintKind {
    Vertex(Coord),
    /// Moving `from -> to`, arriving at the constraint's timestep.
    Edge(Coord, Coord),
}

/// Forbids `agent` from occupying a vertex at `timestep`, or from traversing
/// an edge so that it arrives at `timestep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Constraint {
    pub agent: AgentId,
    pub kind: ConstraintKind,
    pub timestep: usize,
}

impl Constraint {
    pub fn vertex(agent: AgentId, v: Coord, timestep: usize) -> Self {
        Self {
            agent,
            kind: ConstraintKind::Vertex(v),
            timestep,
        }
    }

    pub fn edge(agent: AgentId, from: Coord, to: Coord, timestep: usize) -> Self {
        debug_assert!(from.is_adjacent(to));
        Self {
            agent,
            kind: ConstraintKind::Edge(from, to),
            timestep,
        }
    }

    /// Whether `path` breaks this constraint.
    pub fn violated_by(&self, path: &Path) -> bool {
        match self.kind {
            ConstraintKind::Vertex(v) => path.at(self.timestep) == v,
            ConstraintKind::Edge(from, to) => {
                self.timestep > 0
                    && path.at(self.timestep - 1) == from
                    && path.at(self.timestep) == to
            }
        }
    }
}
