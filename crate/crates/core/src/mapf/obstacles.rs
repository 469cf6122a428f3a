use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::grid::Coord;

/// What the obstacle set means after its last explicit step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeyondHorizon {
    /// The final step's set (and the final predicted vertex) stays blocked.
    #[default]
    Persist,
    /// Nothing is blocked after the last step.
    Drop,
}

/// Time-indexed forbidden vertices issued at timestep `issued_at`.
///
/// `steps[h - 1]` is blocked at `issued_at + h` for `h` in `1..=H`. `current`
/// holds the observed uncontrolled positions at `issued_at`; it is only used
/// for the swap rule in [`DynamicObstacleSet::blocks_move`]. `static_vertices`
/// are blocked at every timestep after `issued_at`, regardless of the
/// beyond-horizon policy. All lists are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DynamicObstacleSet {
    pub issued_at: usize,
    pub current: Vec<Coord>,
    pub steps: Vec<Vec<Coord>>,
    pub static_vertices: Vec<Coord>,
    pub beyond: BeyondHorizon,
}

impl DynamicObstacleSet {
    pub fn empty(issued_at: usize) -> Self {
        Self {
            issued_at,
            ..Self::default()
        }
    }

    pub fn new(
        issued_at: usize,
        current: Vec<Coord>,
        steps: Vec<Vec<Coord>>,
        beyond: BeyondHorizon,
    ) -> Self {
        let mut set = Self {
            issued_at,
            current,
            steps,
            static_vertices: Vec::new(),
            beyond,
        };
        set.normalize();
        set
    }

    pub fn with_static(mut self, vertices: impl IntoIterator<Item = Coord>) -> Self {
        self.static_vertices.extend(vertices);
        self.normalize();
        self
    }

    fn normalize(&mut self) {
        self.current.sort_unstable();
        self.current.dedup();
        for s in &mut self.steps {
            s.sort_unstable();
            s.dedup();
        }
        self.static_vertices.sort_unstable();
        self.static_vertices.dedup();
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// No vertex is ever blocked.
    pub fn is_empty(&self) -> bool {
        self.static_vertices.is_empty() && self.steps.iter().all(|s| s.is_empty())
    }

    /// Last timestep at which the set changes; it is constant afterwards.
    pub fn last_change(&self) -> usize {
        self.issued_at + self.steps.len() + 1
    }

    /// The interval set in force at `t` (excluding static vertices).
    pub fn step_set(&self, t: usize) -> &[Coord] {
        if t < self.issued_at {
            return &[];
        }
        if t == self.issued_at {
            return &self.current;
        }
        let h = t - self.issued_at;
        match self.steps.get(h - 1) {
            Some(s) => s,
            None => match (self.beyond, self.steps.last()) {
                (BeyondHorizon::Persist, Some(last)) => last,
                _ => &[],
            },
        }
    }

    /// Whether occupying `v` at `t` is forbidden.
    pub fn blocks_vertex(&self, v: Coord, t: usize) -> bool {
        if t <= self.issued_at {
            return false;
        }
        self.static_vertices.binary_search(&v).is_ok() || self.step_set(t).binary_search(&v).is_ok()
    }

    /// Whether moving `from -> to` arriving at `t` could swap with an
    /// uncontrolled agent: `to` is in the set at `t - 1` and `from` is in the
    /// set at `t`.
    pub fn blocks_move(&self, from: Coord, to: Coord, t: usize) -> bool {
        if from == to || t <= self.issued_at {
            return false;
        }
        self.step_set(t - 1).binary_search(&to).is_ok()
            && self.step_set(t).binary_search(&from).is_ok()
    }

    /// Vertex is blocked at every timestep `>= t`.
    pub fn blocks_forever_from(&self, v: Coord, t: usize) -> bool {
        if self.static_vertices.binary_search(&v).is_ok() {
            return true;
        }
        self.beyond == BeyondHorizon::Persist
            && self
                .steps
                .last()
                .is_some_and(|last| last.binary_search(&v).is_ok())
            && t >= self.issued_at
    }

    /// Latest timestep at which `v` is blocked, if that is finite. `None`
    /// means never blocked; `Some(usize::MAX)` means blocked forever.
    pub fn last_block_time(&self, v: Coord) -> Option<usize> {
        if self.blocks_forever_from(v, self.issued_at) {
            return Some(usize::MAX);
        }
        self.steps
            .iter()
            .enumerate()
            .rev()
            .find(|(_, s)| s.binary_search(&v).is_ok())
            .map(|(i, _)| self.issued_at + i + 1)
    }
}
