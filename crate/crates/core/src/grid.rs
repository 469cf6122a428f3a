//! 4-connected grid graph with wait self-loops, task spots and memoized
//! breadth-first distance fields.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use hashbrown::HashMap;
use serde::{Deserialize, Serialize};

/// Sentinel distance for vertices that cannot be reached.
pub const UNREACHABLE: u32 = u32::MAX;

/// Default number of distance fields kept per [`DistanceCache`].
pub const DEFAULT_CACHE_CAP: usize = 4096;

/// A grid cell. Serialized as `[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// Orthogonally adjacent (distance exactly one).
    pub fn is_adjacent(self, other: Coord) -> bool {
        self.manhattan(other) == 1
    }
}

impl From<[usize; 2]> for Coord {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Coord> for [usize; 2] {
    fn from(c: Coord) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("map has zero width or height")]
    EmptyDimensions,
    #[error("passability mask has {got} cells, expected {expected}")]
    MaskSize { expected: usize, got: usize },
    #[error("map has no passable cells")]
    NoPassableCells,
    #[error("task spot {0} is blocked or out of bounds")]
    BadTaskSpot(Coord),
    #[error("vertex {0} is blocked or out of bounds")]
    NotPassable(Coord),
}

/// Undirected grid graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    name: String,
    width: usize,
    height: usize,
    passable: Vec<bool>,
    task_spots: Vec<Coord>,
}

impl GridMap {
    /// Builds a map from a row-major passability mask. `task_spots = None`
    /// makes every passable cell a task spot.
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        passable: Vec<bool>,
        task_spots: Option<Vec<Coord>>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyDimensions);
        }
        if passable.len() != width * height {
            return Err(GridError::MaskSize {
                expected: width * height,
                got: passable.len(),
            });
        }
        if !passable.iter().any(|&p| p) {
            return Err(GridError::NoPassableCells);
        }
        let mut map = Self {
            name: name.into(),
            width,
            height,
            passable,
            task_spots: Vec::new(),
        };
        let mut spots = match task_spots {
            Some(spots) => {
                if let Some(&bad) = spots.iter().find(|c| !map.is_passable(**c)) {
                    return Err(GridError::BadTaskSpot(bad));
                }
                spots
            }
            None => map.passable_cells().collect(),
        };
        spots.sort_unstable();
        spots.dedup();
        map.task_spots = spots;
        Ok(map)
    }

    /// Obstacle-free `height x width` grid.
    pub fn open(width: usize, height: usize) -> Result<Self, GridError> {
        Self::new("open", width, height, alloc::vec![true; width * height], None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn task_spots(&self) -> &[Coord] {
        &self.task_spots
    }

    pub fn is_task_spot(&self, c: Coord) -> bool {
        self.task_spots.binary_search(&c).is_ok()
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn is_passable(&self, c: Coord) -> bool {
        self.in_bounds(c) && self.passable[c.row * self.width + c.col]
    }

    /// Number of cells (passable or not); valid vertex indices are `< num_cells()`.
    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// |V|.
    pub fn num_vertices(&self) -> usize {
        self.passable.iter().filter(|&&p| p).count()
    }

    pub fn index(&self, c: Coord) -> usize {
        debug_assert!(self.in_bounds(c));
        c.row * self.width + c.col
    }

    pub fn coord(&self, idx: usize) -> Coord {
        Coord::new(idx / self.width, idx % self.width)
    }

    pub fn passable_mask(&self) -> &[bool] {
        &self.passable
    }

    /// Passable cells in row-major order.
    pub fn passable_cells(&self) -> impl Iterator<Item = Coord> + '_ {
        self.passable
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(move |(i, _)| self.coord(i))
    }

    /// The queried vertex (wait edge) followed by the passable cells above,
    /// below, left and right of it.
    pub fn neighbors(&self, v: Coord) -> Result<Vec<Coord>, GridError> {
        if !self.is_passable(v) {
            return Err(GridError::NotPassable(v));
        }
        Ok(self
            .neighbor_indices(self.index(v))
            .map(|i| self.coord(i))
            .collect())
    }

    /// Index form of [`GridMap::neighbors`], same order. `idx` must be passable.
    pub fn neighbor_indices(&self, idx: usize) -> impl Iterator<Item = usize> {
        let (row, col) = (idx / self.width, idx % self.width);
        let w = self.width;
        let cand = [
            Some(idx),
            (row > 0).then(|| idx - w),
            (row + 1 < self.height).then(|| idx + w),
            (col > 0).then(|| idx - 1),
            (col + 1 < self.width).then(|| idx + 1),
        ];
        let passable = &self.passable;
        let mut out = [usize::MAX; 5];
        let mut n = 0;
        for i in cand.into_iter().flatten() {
            if passable[i] {
                out[n] = i;
                n += 1;
            }
        }
        out.into_iter().take(n)
    }

    /// Exact hop distance from `src` to every cell (uncached).
    pub fn shortest_path_dist(&self, src: Coord) -> Result<DistanceField, GridError> {
        if !self.is_passable(src) {
            return Err(GridError::NotPassable(src));
        }
        let mut dist = alloc::vec![UNREACHABLE; self.num_cells()];
        let mut queue = VecDeque::new();
        let s = self.index(src);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = dist[u];
            for v in self.neighbor_indices(u) {
                if dist[v] == UNREACHABLE {
                    dist[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(DistanceField {
            source: src,
            width: self.width,
            dist,
        })
    }

    /// True when every passable cell is reachable from every other.
    pub fn is_connected(&self) -> bool {
        let Some(first) = self.passable_cells().next() else {
            return false;
        };
        match self.shortest_path_dist(first) {
            Ok(field) => self
                .passable_cells()
                .all(|c| field.get(c).is_some()),
            Err(_) => false,
        }
    }
}

/// BFS hop distances from one source vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    source: Coord,
    width: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn source(&self) -> Coord {
        self.source
    }

    /// `None` when `c` is unreachable, blocked or out of bounds.
    pub fn get(&self, c: Coord) -> Option<u32> {
        if c.col >= self.width {
            return None;
        }
        self.dist
            .get(c.row * self.width + c.col)
            .copied()
            .filter(|&d| d != UNREACHABLE)
    }

    /// Raw distance by cell index, [`UNREACHABLE`] if unreachable.
    #[inline]
    pub fn at(&self, idx: usize) -> u32 {
        self.dist[idx]
    }
}

/// LRU-bounded memo of distance fields for a single map. Not shared between
/// maps; callers own one per run.
#[derive(Debug, Clone)]
pub struct DistanceCache {
    cap: usize,
    tick: u64,
    fields: HashMap<Coord, (Arc<DistanceField>, u64)>,
}

impl Default for DistanceCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAP)
    }
}

impl DistanceCache {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            tick: 0,
            fields: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn get(&mut self, map: &GridMap, src: Coord) -> Result<Arc<DistanceField>, GridError> {
        self.tick += 1;
        if let Some((field, stamp)) = self.fields.get_mut(&src) {
            *stamp = self.tick;
            return Ok(Arc::clone(field));
        }
        let field = Arc::new(map.shortest_path_dist(src)?);
        if self.fields.len() >= self.cap {
            let oldest = self
                .fields
                .iter()
                .min_by_key(|(_, (_, stamp))| *stamp)
                .map(|(k, _)| *k);
            if let Some(k) = oldest {
                self.fields.remove(&k);
            }
        }
        self.fields.insert(src, (Arc::clone(&field), self.tick));
        Ok(field)
    }

    /// Hop distance between two vertices, `None` if disconnected.
    pub fn distance(&mut self, map: &GridMap, from: Coord, to: Coord) -> Result<Option<u32>, GridError> {
        Ok(self.get(map, to)?.get(from))
    }

    /// Shortest path `from -> to` (inclusive), following the distance field of
    /// `to` with the deterministic neighbor order. `None` if disconnected.
    pub fn shortest_path(
        &mut self,
        map: &GridMap,
        from: Coord,
        to: Coord,
    ) -> Result<Option<Vec<Coord>>, GridError> {
        let field = self.get(map, to)?;
        if !map.is_passable(from) {
            return Err(GridError::NotPassable(from));
        }
        if field.get(from).is_none() {
            return Ok(None);
        }
        let mut path = alloc::vec![from];
        let mut cur = map.index(from);
        while field.at(cur) != 0 {
            let d = field.at(cur);
            cur = map
                .neighbor_indices(cur)
                .find(|&n| field.at(n) + 1 == d)
                .expect("distance field has a descending neighbor");
            path.push(map.coord(cur));
        }
        Ok(Some(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn walled() -> GridMap {
        // 3x3 with the center boxed in by blocked cells around it.
        let mut mask = vec![true; 25];
        for (r, c) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            mask[r * 5 + c] = false;
        }
        GridMap::new("walled", 5, 5, mask, None).unwrap()
    }

    #[test]
    fn neighbors_interior_corner_and_walled() {
        let m = GridMap::open(5, 5).unwrap();
        let inner = m.neighbors(Coord::new(2, 2)).unwrap();
        assert_eq!(
            inner,
            vec![
                Coord::new(2, 2),
                Coord::new(1, 2),
                Coord::new(3, 2),
                Coord::new(2, 1),
                Coord::new(2, 3)
            ]
        );
        assert_eq!(m.neighbors(Coord::new(0, 0)).unwrap().len(), 3);
        let w = walled();
        assert_eq!(w.neighbors(Coord::new(2, 2)).unwrap(), vec![Coord::new(2, 2)]);
    }

    #[test]
    fn neighbors_of_blocked_cell_is_an_error() {
        let w = walled();
        assert_eq!(w.neighbors(Coord::new(1, 2)), Err(GridError::NotPassable(Coord::new(1, 2))));
        assert!(w.neighbors(Coord::new(9, 9)).is_err());
    }

    #[test]
    fn bfs_distances() {
        let m = GridMap::open(3, 3).unwrap();
        let d = m.shortest_path_dist(Coord::new(0, 0)).unwrap();
        assert_eq!(d.get(Coord::new(0, 0)), Some(0));
        assert_eq!(d.get(Coord::new(2, 2)), Some(4));
        let w = walled();
        let d = w.shortest_path_dist(Coord::new(0, 0)).unwrap();
        assert_eq!(d.get(Coord::new(2, 2)), None);
        assert!(!w.is_connected());
        assert!(m.is_connected());
    }

    #[test]
    fn cache_evicts_least_recent() {
        let m = GridMap::open(4, 4).unwrap();
        let mut cache = DistanceCache::new(2);
        let a = Coord::new(0, 0);
        let b = Coord::new(1, 1);
        let c = Coord::new(2, 2);
        cache.get(&m, a).unwrap();
        cache.get(&m, b).unwrap();
        cache.get(&m, a).unwrap();
        cache.get(&m, c).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(cache.fields.contains_key(&a));
        assert!(!cache.fields.contains_key(&b));
    }

    #[test]
    fn shortest_path_follows_field() {
        let m = GridMap::open(4, 4).unwrap();
        let mut cache = DistanceCache::default();
        let p = cache
            .shortest_path(&m, Coord::new(0, 0), Coord::new(2, 3))
            .unwrap()
            .unwrap();
        assert_eq!(p.len(), 6);
        assert!(p.windows(2).all(|w| w[0].is_adjacent(w[1])));
    }

    #[test]
    fn task_spots_validated() {
        let mask = vec![true, false, true, true];
        let err = GridMap::new("m", 2, 2, mask.clone(), Some(vec![Coord::new(0, 1)]));
        assert_eq!(err, Err(GridError::BadTaskSpot(Coord::new(0, 1))));
        let ok = GridMap::new("m", 2, 2, mask, None).unwrap();
        assert_eq!(ok.task_spots().len(), 3);
        assert!(GridMap::new("m", 1, 1, vec![false], None).is_err());
    }
}
