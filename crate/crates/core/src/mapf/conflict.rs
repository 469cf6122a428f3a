use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{AgentId, BeyondHorizon, Constraint, DynamicObstacleSet, Path};
use crate::grid::Coord;

/// One side of a conflict. The variant order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Party {
    Controlled(AgentId),
    /// Rounded predicted path of an uncontrolled agent.
    Predicted(AgentId),
    /// Any vertex of the obstacle set (CP interval vertex or held agent).
    IntervalVertex,
}

impl Party {
    pub fn controlled(self) -> Option<AgentId> {
        match self {
            Party::Controlled(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConflictKind {
    Vertex(Coord),
    /// Party `a` moves `from -> to` while party `b` moves the opposite way.
    Edge { from: Coord, to: Coord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub kind: ConflictKind,
    pub a: Party,
    pub b: Party,
    /// For edge conflicts, the arrival timestep.
    pub timestep: usize,
}

impl Conflict {
    /// The constraint that resolves this conflict for `agent`, if it is a
    /// controlled party.
    pub fn constraint_for(&self, agent: AgentId) -> Option<Constraint> {
        let is_a = self.a == Party::Controlled(agent);
        let is_b = self.b == Party::Controlled(agent);
        if !is_a && !is_b {
            return None;
        }
        Some(match self.kind {
            ConflictKind::Vertex(v) => Constraint::vertex(agent, v, self.timestep),
            ConflictKind::Edge { from, to } if is_a => Constraint::edge(agent, from, to, self.timestep),
            ConflictKind::Edge { from, to } => Constraint::edge(agent, to, from, self.timestep),
        })
    }

    fn key(&self) -> (Party, Party, u8) {
        let kind = match self.kind {
            ConflictKind::Vertex(_) => 0,
            ConflictKind::Edge { .. } => 1,
        };
        (self.a, self.b, kind)
    }
}

/// Agents that receive a constraint: nobody when both parties are
/// uncontrolled, only the controlled one when the other is a prediction or an
/// interval vertex, both when both are controlled.
pub fn classify_conflict(c: &Conflict) -> Vec<AgentId> {
    match (c.a.controlled(), c.b.controlled()) {
        (None, None) => Vec::new(),
        (Some(a), None) => alloc::vec![a],
        (None, Some(b)) => alloc::vec![b],
        (Some(a), Some(b)) => alloc::vec![a, b],
    }
}

/// Position of a predicted path at `t`, honoring the beyond-horizon policy.
pub(crate) fn predicted_at(p: &Path, t: usize, beyond: BeyondHorizon) -> Option<Coord> {
    if t < p.t0 {
        return None;
    }
    if t > p.end_time() && beyond == BeyondHorizon::Drop {
        return None;
    }
    Some(p.at(t))
}

struct Scan<'a> {
    solution: &'a [Path],
    predictions: &'a [Path],
    obstacles: &'a DynamicObstacleSet,
    t_start: usize,
    t_end: usize,
}

impl<'a> Scan<'a> {
    fn new(
        solution: &'a [Path],
        predictions: &'a [Path],
        obstacles: &'a DynamicObstacleSet,
        horizon_end: Option<usize>,
    ) -> Option<Self> {
        let t_start = solution.iter().map(|p| p.t0).min()?;
        let mut t_end = solution.iter().map(Path::end_time).max()?;
        t_end = t_end.max(predictions.iter().map(Path::end_time).max().unwrap_or(0));
        if !obstacles.is_empty() {
            t_end = t_end.max(obstacles.last_change());
        }
        if let Some(h) = horizon_end {
            t_end = t_end.min(h);
        }
        Some(Self {
            solution,
            predictions,
            obstacles,
            t_start,
            t_end,
        })
    }

    /// Calls `f` for every conflict at timestep `t`.
    fn at(&self, t: usize, mut f: impl FnMut(Conflict)) {
        let beyond = self.obstacles.beyond;
        let moved = t > self.t_start;
        for (i, pa) in self.solution.iter().enumerate() {
            let va = pa.at(t);
            let ua = if moved { pa.at(t - 1) } else { va };
            let a = Party::Controlled(pa.agent);
            for pb in &self.solution[i + 1..] {
                let vb = pb.at(t);
                let (a, b) = order(a, Party::Controlled(pb.agent));
                if va == vb {
                    f(Conflict {
                        kind: ConflictKind::Vertex(va),
                        a,
                        b,
                        timestep: t,
                    });
                } else if moved && ua != va && ua == vb && pb.at(t - 1) == va {
                    let (from, to) = if a == Party::Controlled(pa.agent) { (ua, va) } else { (va, ua) };
                    f(Conflict {
                        kind: ConflictKind::Edge { from, to },
                        a,
                        b,
                        timestep: t,
                    });
                }
            }
            for pred in self.predictions {
                let Some(vb) = predicted_at(pred, t, beyond) else {
                    continue;
                };
                let b = Party::Predicted(pred.agent);
                if va == vb {
                    f(Conflict {
                        kind: ConflictKind::Vertex(va),
                        a,
                        b,
                        timestep: t,
                    });
                } else if moved && ua != va && ua == vb && predicted_at(pred, t - 1, beyond) == Some(va) {
                    f(Conflict {
                        kind: ConflictKind::Edge { from: ua, to: va },
                        a,
                        b,
                        timestep: t,
                    });
                }
            }
            if self.obstacles.blocks_vertex(va, t) {
                f(Conflict {
                    kind: ConflictKind::Vertex(va),
                    a,
                    b: Party::IntervalVertex,
                    timestep: t,
                });
            } else if moved && self.obstacles.blocks_move(ua, va, t) {
                f(Conflict {
                    kind: ConflictKind::Edge { from: ua, to: va },
                    a,
                    b: Party::IntervalVertex,
                    timestep: t,
                });
            }
        }
    }
}

fn order(a: Party, b: Party) -> (Party, Party) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Earliest conflict of the controlled `solution` with itself, with the
/// predicted paths, and with the obstacle set. Ties at one timestep go to
/// the lexicographically smallest party pair. Paths are padded at their last
/// vertex. Conflicts after `horizon_end` are ignored, and so are those at the
/// start time: start states are given, so no constraint could resolve them.
pub fn detect_first_conflict(
    solution: &[Path],
    predictions: &[Path],
    obstacles: &DynamicObstacleSet,
    horizon_end: Option<usize>,
) -> Option<Conflict> {
    let scan = Scan::new(solution, predictions, obstacles, horizon_end)?;
    for t in scan.t_start + 1..=scan.t_end {
        let mut best: Option<Conflict> = None;
        scan.at(t, |c| {
            if best.is_none_or(|b| c.key() < b.key()) {
                best = Some(c);
            }
        });
        if best.is_some() {
            return best;
        }
    }
    None
}

/// Number of distinct (controlled agent, timestep) pairs involved in at least
/// one conflict.
pub fn count_conflicts(
    solution: &[Path],
    predictions: &[Path],
    obstacles: &DynamicObstacleSet,
    horizon_end: Option<usize>,
) -> usize {
    let Some(scan) = Scan::new(solution, predictions, obstacles, horizon_end) else {
        return 0;
    };
    let mut total = 0;
    let mut hit: Vec<AgentId> = Vec::new();
    for t in scan.t_start + 1..=scan.t_end {
        hit.clear();
        scan.at(t, |c| {
            hit.extend(c.a.controlled());
            hit.extend(c.b.controlled());
        });
        hit.sort_unstable();
        hit.dedup();
        total += hit.len();
    }
    total
}
