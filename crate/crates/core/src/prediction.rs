//! Observation histories, prediction bundles and the built-in predictors.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::grid::{Coord, DistanceCache, GridError, GridMap, UNREACHABLE};
use crate::mapf::{AgentId, Path};

/// Default number of observations fed to a predictor.
pub const DEFAULT_HISTORY_LEN: usize = 4;

/// A real-valued position `(row, col)`. Serialized as `[r, c]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(self, other: Point) -> f64 {
        libm::hypot(self.row - other.row, self.col - other.col)
    }

    pub fn is_finite(self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }

    /// Clamp into `[0, height - 1] x [0, width - 1]`.
    pub fn clamped(self, map: &GridMap) -> Point {
        Point {
            row: self.row.clamp(0.0, (map.height() - 1) as f64),
            col: self.col.clamp(0.0, (map.width() - 1) as f64),
        }
    }

    /// Nearest passable vertex by Euclidean distance; ties go to the
    /// smaller coordinate.
    pub fn nearest_vertex(self, map: &GridMap) -> Coord {
        let p = self.clamped(map);
        let rounded = Coord::new(libm::round(p.row) as usize, libm::round(p.col) as usize);
        if map.is_passable(rounded) {
            return rounded;
        }
        map.passable_cells()
            .min_by(|a, b| {
                let da = p.distance(Point::from(*a));
                let db = p.distance(Point::from(*b));
                da.total_cmp(&db).then(a.cmp(b))
            })
            .expect("map has a passable cell")
    }
}

impl From<Coord> for Point {
    fn from(c: Coord) -> Self {
        Point::new(c.row as f64, c.col as f64)
    }
}

impl From<[f64; 2]> for Point {
    fn from([row, col]: [f64; 2]) -> Self {
        Point { row, col }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.row, p.col]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PredictionError {
    #[error("prediction horizon must be at least 1")]
    ZeroHorizon,
    #[error("no observations")]
    EmptyHistory,
    #[error("agent {agent} has {got} observations, need {needed}")]
    InsufficientHistory { agent: AgentId, needed: usize, got: usize },
    #[error("predictor transport failed: {0}")]
    Transport(String),
    #[error("predictor missed its {ms} ms deadline")]
    Deadline { ms: u64 },
    #[error("malformed prediction: {0}")]
    Schema(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Sliding window of the last `window` observed positions per uncontrolled
/// agent, plus the timestep of the latest observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationHistory {
    window: usize,
    t: usize,
    tracks: BTreeMap<AgentId, Vec<Coord>>,
}

impl ObservationHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            t: 0,
            tracks: BTreeMap::new(),
        }
    }

    /// History whose latest entry is at timestep `t`. Tracks longer than
    /// `window` keep only their tail.
    pub fn from_tracks(window: usize, t: usize, tracks: BTreeMap<AgentId, Vec<Coord>>) -> Self {
        let mut h = Self::new(window);
        h.t = t;
        for (id, mut track) in tracks {
            if track.len() > h.window {
                track.drain(..track.len() - h.window);
            }
            h.tracks.insert(id, track);
        }
        h
    }

    /// Record all positions observed at timestep `t`.
    pub fn observe<I>(&mut self, t: usize, positions: I)
    where
        I: IntoIterator<Item = (AgentId, Coord)>,
    {
        self.t = t;
        for (id, c) in positions {
            let track = self.tracks.entry(id).or_default();
            track.push(c);
            if track.len() > self.window {
                track.remove(0);
            }
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Timestep of the latest observation.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn tracks(&self) -> &BTreeMap<AgentId, Vec<Coord>> {
        &self.tracks
    }

    pub fn track(&self, agent: AgentId) -> Option<&[Coord]> {
        self.tracks.get(&agent).map(Vec::as_slice)
    }

    pub fn last(&self, agent: AgentId) -> Option<Coord> {
        self.tracks.get(&agent).and_then(|t| t.last().copied())
    }

    pub fn current_positions(&self) -> BTreeMap<AgentId, Coord> {
        self.tracks
            .iter()
            .filter_map(|(id, t)| t.last().map(|c| (*id, *c)))
            .collect()
    }
}

/// `points[b][h - 1]` predicts agent `b` at `issued_at + h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub issued_at: usize,
    pub horizon: usize,
    pub points: BTreeMap<AgentId, Vec<Point>>,
}

impl PredictionBundle {
    /// Every agent in `expected` has exactly `horizon` finite points and no
    /// other agents are present.
    pub fn validate(&self, expected: impl IntoIterator<Item = AgentId>) -> Result<(), PredictionError> {
        let expected: BTreeSet<AgentId> = expected.into_iter().collect();
        let got: BTreeSet<AgentId> = self.points.keys().copied().collect();
        if expected != got {
            return Err(PredictionError::Schema(alloc::format!(
                "agent set {got:?} does not match observed agents {expected:?}"
            )));
        }
        for (id, pts) in &self.points {
            if pts.len() != self.horizon {
                return Err(PredictionError::Schema(alloc::format!(
                    "agent {id}: {} points for horizon {}",
                    pts.len(),
                    self.horizon
                )));
            }
            if let Some(p) = pts.iter().find(|p| !p.is_finite()) {
                return Err(PredictionError::Schema(alloc::format!("agent {id}: non-finite point {p:?}")));
            }
        }
        Ok(())
    }

    pub fn clamp(&mut self, map: &GridMap) {
        for pts in self.points.values_mut() {
            for p in pts.iter_mut() {
                *p = p.clamped(map);
            }
        }
    }

    /// Predictions snapped to vertices, starting from the observed position
    /// at `issued_at`.
    pub fn predicted_paths(&self, map: &GridMap, current: &BTreeMap<AgentId, Coord>) -> Vec<Path> {
        self.points
            .iter()
            .map(|(id, pts)| {
                let mut v = Vec::with_capacity(pts.len() + 1);
                let first = current.get(id).copied().unwrap_or_else(|| {
                    pts.first().map_or_else(|| Coord::new(0, 0), |p| p.nearest_vertex(map))
                });
                v.push(first);
                v.extend(pts.iter().map(|p| p.nearest_vertex(map)));
                Path::new(*id, self.issued_at, v)
            })
            .collect()
    }
}

/// Produces `horizon`-step predictions for every agent in a history.
pub trait Predictor {
    fn name(&self) -> &str;

    fn predict(
        &mut self,
        history: &ObservationHistory,
        map: &GridMap,
        horizon: usize,
    ) -> Result<PredictionBundle, PredictionError>;
}

/// Every step repeats the last observed position.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantPredictor;

pub fn predict_constant(history: &ObservationHistory, horizon: usize) -> Result<PredictionBundle, PredictionError> {
    if horizon == 0 {
        return Err(PredictionError::ZeroHorizon);
    }
    if history.is_empty() {
        return Err(PredictionError::EmptyHistory);
    }
    let mut points = BTreeMap::new();
    for (id, track) in history.tracks() {
        let last = *track.last().ok_or(PredictionError::InsufficientHistory {
            agent: *id,
            needed: 1,
            got: 0,
        })?;
        points.insert(*id, alloc::vec![Point::from(last); horizon]);
    }
    Ok(PredictionBundle {
        issued_at: history.t(),
        horizon,
        points,
    })
}

impl Predictor for ConstantPredictor {
    fn name(&self) -> &str {
        "constant"
    }

    fn predict(
        &mut self,
        history: &ObservationHistory,
        _map: &GridMap,
        horizon: usize,
    ) -> Result<PredictionBundle, PredictionError> {
        predict_constant(history, horizon)
    }
}

/// Guesses each agent is heading for the nearest free task spot and follows
/// the shortest path there, then waits.
#[derive(Debug, Clone, Default)]
pub struct AStarGoalPredictor {
    cache: DistanceCache,
}

impl AStarGoalPredictor {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Last position advanced one step along the last observed move, if that
/// cell is passable.
fn extrapolate(map: &GridMap, track: &[Coord]) -> Coord {
    let last = track[track.len() - 1];
    let prev = track[track.len() - 2];
    let next_r = (2 * last.row).checked_sub(prev.row);
    let next_c = (2 * last.col).checked_sub(prev.col);
    match (next_r, next_c) {
        (Some(r), Some(c)) if map.is_passable(Coord::new(r, c)) => Coord::new(r, c),
        _ => last,
    }
}

/// Assign each agent (in id order) the task spot nearest to its extrapolated
/// position among those not taken yet; ties go to the smaller coordinate.
/// Once every spot is taken, spots may be shared. `None` means no task spot
/// is reachable.
pub fn assign_nearest_spots(
    map: &GridMap,
    cache: &mut DistanceCache,
    from: &BTreeMap<AgentId, Coord>,
) -> Result<BTreeMap<AgentId, Option<Coord>>, GridError> {
    let mut taken = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (&id, &src) in from {
        let field = cache.get(map, src)?;
        let best = |allow_taken: bool| {
            map.task_spots()
                .iter()
                .filter(|s| allow_taken || !taken.contains(*s))
                .filter_map(|s| {
                    let d = field.at(map.index(*s));
                    (d != UNREACHABLE).then_some((d, *s))
                })
                .min()
                .map(|(_, s)| s)
        };
        let goal = best(false).or_else(|| best(true));
        if let Some(g) = goal {
            taken.insert(g);
        }
        out.insert(id, goal);
    }
    Ok(out)
}

pub fn predict_astar_goal(
    history: &ObservationHistory,
    map: &GridMap,
    horizon: usize,
    cache: &mut DistanceCache,
) -> Result<PredictionBundle, PredictionError> {
    if horizon == 0 {
        return Err(PredictionError::ZeroHorizon);
    }
    if history.is_empty() {
        return Err(PredictionError::EmptyHistory);
    }
    if map.task_spots().is_empty() {
        log::warn!("map {} has no task spots; using constant predictions", map.name());
        return predict_constant(history, horizon);
    }
    let mut heads = BTreeMap::new();
    for (id, track) in history.tracks() {
        if track.len() < 2 {
            return Err(PredictionError::InsufficientHistory {
                agent: *id,
                needed: 2,
                got: track.len(),
            });
        }
        for c in track {
            if !map.is_passable(*c) {
                return Err(GridError::NotPassable(*c).into());
            }
        }
        heads.insert(*id, extrapolate(map, track));
    }
    let goals = assign_nearest_spots(map, cache, &heads)?;
    let mut points = BTreeMap::new();
    for (id, track) in history.tracks() {
        let cur = track[track.len() - 1];
        let route = match goals[id] {
            Some(g) => cache.shortest_path(map, cur, g)?.unwrap_or_else(|| alloc::vec![cur]),
            None => alloc::vec![cur],
        };
        let pts = (1..=horizon)
            .map(|h| Point::from(route[h.min(route.len() - 1)]))
            .collect();
        points.insert(*id, pts);
    }
    Ok(PredictionBundle {
        issued_at: history.t(),
        horizon,
        points,
    })
}

impl Predictor for AStarGoalPredictor {
    fn name(&self) -> &str {
        "astar-goal"
    }

    fn predict(
        &mut self,
        history: &ObservationHistory,
        map: &GridMap,
        horizon: usize,
    ) -> Result<PredictionBundle, PredictionError> {
        predict_astar_goal(history, map, horizon, &mut self.cache)
    }
}

/// Infers each agent's goal from its recent moves and predicts the mean
/// position over all goals still consistent with them.
///
/// A move `u -> v` is consistent with task spot `g` when it shortens the
/// shortest-path distance to `g` by one. Moves are scanned from the most
/// recent backwards until one contradicts every surviving candidate, which is
/// where the agent last switched goals. An agent standing on a candidate spot
/// has just arrived and is assumed to draw a fresh goal uniformly. Each
/// candidate contributes the position reached after `h` steps along its
/// shortest path (waiting at the goal once reached), and the prediction is
/// their unweighted mean.
#[derive(Debug, Clone, Default)]
pub struct GoalPosteriorPredictor {
    cache: DistanceCache,
}

impl GoalPosteriorPredictor {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Task spots consistent with the tail of `track`.
fn consistent_goals(map: &GridMap, cache: &mut DistanceCache, track: &[Coord]) -> Result<Vec<Coord>, GridError> {
    let cur = track[track.len() - 1];
    let mut fields = Vec::new();
    for &g in map.task_spots() {
        let field = cache.get(map, g)?;
        if field.get(cur).is_some() {
            fields.push((g, field));
        }
    }
    let all: Vec<Coord> = fields.iter().map(|(g, _)| *g).collect();
    let mut alive: Vec<usize> = (0..fields.len()).collect();
    for pair in track.windows(2).rev() {
        let (u, v) = (map.index(pair[0]), map.index(pair[1]));
        let next: Vec<usize> = alive
            .iter()
            .copied()
            .filter(|&i| {
                let f = &fields[i].1;
                f.at(u) != UNREACHABLE && f.at(u).checked_sub(1) == Some(f.at(v))
            })
            .collect();
        if next.is_empty() {
            break;
        }
        alive = next;
    }
    if alive.len() == fields.len() {
        return Ok(all);
    }
    if alive.iter().any(|&i| fields[i].0 == cur) {
        return Ok(all.into_iter().filter(|g| *g != cur).collect());
    }
    Ok(alive.into_iter().map(|i| fields[i].0).collect())
}

pub fn predict_goal_posterior(
    history: &ObservationHistory,
    map: &GridMap,
    horizon: usize,
    cache: &mut DistanceCache,
) -> Result<PredictionBundle, PredictionError> {
    if horizon == 0 {
        return Err(PredictionError::ZeroHorizon);
    }
    if history.is_empty() {
        return Err(PredictionError::EmptyHistory);
    }
    if map.task_spots().is_empty() {
        log::warn!("map {} has no task spots; using constant predictions", map.name());
        return predict_constant(history, horizon);
    }
    let mut points = BTreeMap::new();
    for (id, track) in history.tracks() {
        for c in track {
            if !map.is_passable(*c) {
                return Err(GridError::NotPassable(*c).into());
            }
        }
        let cur = track[track.len() - 1];
        let goals = consistent_goals(map, cache, track)?;
        let mut sums = alloc::vec![(0.0f64, 0.0f64); horizon];
        for g in &goals {
            let route = cache.shortest_path(map, cur, *g)?.unwrap_or_else(|| alloc::vec![cur]);
            for (h, sum) in sums.iter_mut().enumerate() {
                let c = route[(h + 1).min(route.len() - 1)];
                sum.0 += c.row as f64;
                sum.1 += c.col as f64;
            }
        }
        let pts = if goals.is_empty() {
            alloc::vec![Point::from(cur); horizon]
        } else {
            let n = goals.len() as f64;
            sums.into_iter().map(|(r, c)| Point::new(r / n, c / n)).collect()
        };
        points.insert(*id, pts);
    }
    Ok(PredictionBundle {
        issued_at: history.t(),
        horizon,
        points,
    })
}

impl Predictor for GoalPosteriorPredictor {
    fn name(&self) -> &str {
        "goal-posterior"
    }

    fn predict(
        &mut self,
        history: &ObservationHistory,
        map: &GridMap,
        horizon: usize,
    ) -> Result<PredictionBundle, PredictionError> {
        predict_goal_posterior(history, map, horizon, &mut self.cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn hist(tracks: &[(AgentId, &[(usize, usize)])]) -> ObservationHistory {
        let t = tracks.iter().map(|(_, tr)| tr.len()).max().unwrap_or(1) - 1;
        ObservationHistory::from_tracks(
            DEFAULT_HISTORY_LEN,
            t,
            tracks
                .iter()
                .map(|(id, tr)| (*id, tr.iter().map(|&(r, c)| Coord::new(r, c)).collect()))
                .collect(),
        )
    }

    #[test]
    fn constant_repeats_last_position() {
        let h = hist(&[(0, &[(3, 2), (3, 3)]), (7, &[(1, 1)])]);
        let b = predict_constant(&h, 3).unwrap();
        assert_eq!(b.points[&0], vec![Point::new(3.0, 3.0); 3]);
        assert_eq!(b.points.len(), 2);
        assert_eq!(predict_constant(&h, 0), Err(PredictionError::ZeroHorizon));
        assert_eq!(
            predict_constant(&ObservationHistory::new(4), 2),
            Err(PredictionError::EmptyHistory)
        );
    }

    #[test]
    fn window_keeps_tail() {
        let mut h = ObservationHistory::new(2);
        for t in 0..5 {
            h.observe(t, [(1, Coord::new(0, t))]);
        }
        assert_eq!(h.track(1).unwrap(), &[Coord::new(0, 3), Coord::new(0, 4)]);
        assert_eq!(h.t(), 4);
    }

    #[test]
    fn astar_goal_walks_to_adjacent_spot_then_waits() {
        let m = GridMap::new("row", 5, 1, vec![true; 5], Some(vec![Coord::new(0, 4)])).unwrap();
        let h = hist(&[(0, &[(0, 2), (0, 3)])]);
        let b = predict_astar_goal(&h, &m, 3, &mut DistanceCache::default()).unwrap();
        assert_eq!(b.points[&0], vec![Point::new(0.0, 4.0); 3]);
    }

    #[test]
    fn astar_goal_stationary_agent_heads_for_nearest_spot() {
        let spots = vec![Coord::new(0, 0), Coord::new(0, 6)];
        let m = GridMap::new("row", 7, 1, vec![true; 7], Some(spots)).unwrap();
        let h = hist(&[(0, &[(0, 4), (0, 4)])]);
        let b = predict_astar_goal(&h, &m, 3, &mut DistanceCache::default()).unwrap();
        assert_eq!(b.points[&0], vec![Point::new(0.0, 5.0), Point::new(0.0, 6.0), Point::new(0.0, 6.0)]);
    }

    #[test]
    fn contested_spot_goes_to_lower_id() {
        let spots = vec![Coord::new(0, 0), Coord::new(0, 6)];
        let m = GridMap::new("row", 7, 1, vec![true; 7], Some(spots)).unwrap();
        let mut cache = DistanceCache::default();
        let from: BTreeMap<_, _> = [(1, Coord::new(0, 1)), (2, Coord::new(0, 2))].into();
        let g = assign_nearest_spots(&m, &mut cache, &from).unwrap();
        assert_eq!(g[&1], Some(Coord::new(0, 0)));
        assert_eq!(g[&2], Some(Coord::new(0, 6)));
    }

    #[test]
    fn astar_goal_needs_two_observations() {
        let m = GridMap::open(3, 3).unwrap();
        let h = hist(&[(0, &[(1, 1)])]);
        assert!(matches!(
            predict_astar_goal(&h, &m, 2, &mut DistanceCache::default()),
            Err(PredictionError::InsufficientHistory { agent: 0, .. })
        ));
    }

    #[test]
    fn bundle_validation() {
        let h = hist(&[(0, &[(1, 1)]), (1, &[(2, 2)])]);
        let mut b = predict_constant(&h, 2).unwrap();
        assert!(b.validate([0, 1]).is_ok());
        assert!(b.validate([0]).is_err());
        b.points.get_mut(&1).unwrap().pop();
        assert!(matches!(b.validate([0, 1]), Err(PredictionError::Schema(_))));
    }

    #[test]
    fn snapping_avoids_blocked_cells() {
        let mut mask = vec![true; 9];
        mask[4] = false;
        let m = GridMap::new("hole", 3, 3, mask, None).unwrap();
        assert_eq!(Point::new(1.1, 1.0).nearest_vertex(&m), Coord::new(2, 1));
        assert_eq!(Point::new(-3.0, 9.0).nearest_vertex(&m), Coord::new(0, 2));
    }

    fn two_spot_row() -> GridMap {
        GridMap::new("row", 7, 1, vec![true; 7], Some(vec![Coord::new(0, 0), Coord::new(0, 6)])).unwrap()
    }

    fn posterior(track: &[(usize, usize)], horizon: usize) -> Vec<Point> {
        let h = hist(&[(0, track)]);
        let b = predict_goal_posterior(&h, &two_spot_row(), horizon, &mut DistanceCache::default()).unwrap();
        b.points[&0].clone()
    }

    #[test]
    fn posterior_follows_the_only_consistent_goal() {
        let got = posterior(&[(0, 2), (0, 3)], 4);
        let want: Vec<Point> = [4.0, 5.0, 6.0, 6.0].iter().map(|&c| Point::new(0.0, c)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn posterior_without_evidence_averages_all_spots() {
        // Waiting is consistent with no goal, so both spots stay possible.
        let got = posterior(&[(0, 4), (0, 4)], 3);
        assert_eq!(got, vec![Point::new(0.0, 4.0), Point::new(0.0, 4.0), Point::new(0.0, 3.5)]);
    }

    #[test]
    fn posterior_after_arrival_draws_a_different_spot() {
        let got = posterior(&[(0, 4), (0, 5), (0, 6)], 2);
        assert_eq!(got, vec![Point::new(0.0, 5.0), Point::new(0.0, 4.0)]);
    }

    #[test]
    fn posterior_stops_at_the_last_goal_switch() {
        // Left then right: only the recent rightward moves count.
        let got = posterior(&[(0, 3), (0, 2), (0, 3), (0, 4)], 1);
        assert_eq!(got, vec![Point::new(0.0, 5.0)]);
    }

    #[test]
    fn posterior_without_spots_is_constant() {
        let m = GridMap::new("bare", 3, 3, vec![true; 9], Some(vec![])).unwrap();
        let h = hist(&[(0, &[(1, 1), (1, 2)])]);
        let b = predict_goal_posterior(&h, &m, 2, &mut DistanceCache::default()).unwrap();
        assert_eq!(b.points[&0], vec![Point::new(1.0, 2.0); 2]);
    }
}
