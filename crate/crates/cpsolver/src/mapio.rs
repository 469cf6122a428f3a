//! Map files: MovingAI `.map` text and the JSON map format.

use std::path::Path;

use cpsolver_core::grid::{Coord, GridError, GridMap};
use cpsolver_core::warehouse::{warehouse, WarehouseSize};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("JSON map: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(line: usize, col: usize, msg: impl Into<String>) -> MapError {
    MapError::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

/// The JSON map format. Blocked cells and task spots are `[row, col]` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonMap {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub blocked: Vec<Coord>,
    pub task_spots: Vec<Coord>,
}

impl JsonMap {
    pub fn from_map(map: &GridMap) -> Self {
        let blocked = (0..map.num_cells())
            .map(|i| map.coord(i))
            .filter(|c| !map.is_passable(*c))
            .collect();
        Self {
            name: map.name().to_owned(),
            width: map.width(),
            height: map.height(),
            blocked,
            task_spots: map.task_spots().to_vec(),
        }
    }

    pub fn into_map(self) -> Result<GridMap, MapError> {
        let mut passable = vec![true; self.width * self.height];
        for c in &self.blocked {
            if c.row >= self.height || c.col >= self.width {
                return Err(GridError::NotPassable(*c).into());
            }
            passable[c.row * self.width + c.col] = false;
        }
        Ok(GridMap::new(self.name, self.width, self.height, passable, Some(self.task_spots))?)
    }
}

pub fn to_json(map: &GridMap) -> String {
    serde_json::to_string(&JsonMap::from_map(map)).expect("map serializes")
}

/// MovingAI text. Task spots are not representable and are dropped.
pub fn to_movingai(map: &GridMap) -> String {
    let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", map.height(), map.width());
    for r in 0..map.height() {
        for c in 0..map.width() {
            out.push(if map.is_passable(Coord::new(r, c)) { '.' } else { '@' });
        }
        out.push('\n');
    }
    out
}

/// Parses MovingAI text. Moves are 4-connected even under `type octile`;
/// every passable cell becomes a task spot.
pub fn parse_movingai(text: &str, name: &str) -> Result<GridMap, MapError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let mut height = None;
    let mut width = None;
    let mut saw_type = false;
    loop {
        let Some((no, line)) = lines.next() else {
            return Err(parse_err(text.lines().count() + 1, 1, "missing `map` line"));
        };
        let mut words = line.split_whitespace();
        match (words.next(), words.next(), words.next()) {
            (None, ..) => continue,
            (Some("type"), Some(_), None) => saw_type = true,
            (Some(key @ ("height" | "width")), Some(v), None) => {
                let n: usize = v
                    .parse()
                    .map_err(|_| parse_err(no, line.find(v).unwrap_or(0) + 1, format!("bad {key} {v:?}")))?;
                if key == "height" {
                    height = Some(n);
                } else {
                    width = Some(n);
                }
            }
            (Some("map"), None, None) => break,
            _ => return Err(parse_err(no, 1, format!("unexpected header line {line:?}"))),
        }
    }
    if !saw_type {
        return Err(parse_err(1, 1, "missing `type` line"));
    }
    let (Some(height), Some(width)) = (height, width) else {
        return Err(parse_err(1, 1, "missing height or width"));
    };
    let mut passable = Vec::with_capacity(width * height);
    let mut rows = 0;
    let mut last_line = 0;
    for (no, line) in lines {
        last_line = no;
        if rows == height {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(no, 1, format!("more than {height} rows")));
        }
        let chars: Vec<char> = line.chars().collect();
        if chars.len() != width {
            return Err(parse_err(no, chars.len().min(width) + 1, format!("row has {} cells, expected {width}", chars.len())));
        }
        for (i, ch) in chars.into_iter().enumerate() {
            passable.push(match ch {
                '.' | 'G' => true,
                '@' | 'O' | 'T' => false,
                other => return Err(parse_err(no, i + 1, format!("unknown cell {other:?}"))),
            });
        }
        rows += 1;
    }
    if rows < height {
        return Err(parse_err(last_line + 1, 1, format!("{rows} rows, expected {height}")));
    }
    if !passable.iter().any(|&p| p) {
        return Err(parse_err(1, 1, "map has no passable cells"));
    }
    Ok(GridMap::new(name, width, height, passable, None)?)
}

/// Either format, told apart by the first non-blank character.
pub fn parse_map(text: &str, name: &str) -> Result<GridMap, MapError> {
    if text.trim_start().starts_with('{') {
        let json: JsonMap = serde_json::from_str(text)?;
        json.into_map()
    } else {
        parse_movingai(text, name)
    }
}

/// A built-in map (`warehouse-small`, `warehouse-medium`,
/// `warehouse-large`) or a file path. Warns when the passable region is
/// disconnected.
pub fn load_map(name: &str) -> Result<GridMap, MapError> {
    let map = match builtin(name) {
        Some(m) => m,
        None => {
            let path = Path::new(name);
            let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
                path: name.to_owned(),
                source,
            })?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
            parse_map(&text, stem)?
        }
    };
    if !map.is_connected() {
        log::warn!("map {} has a disconnected passable region", map.name());
    }
    Ok(map)
}

pub fn builtin(name: &str) -> Option<GridMap> {
    let size = match name {
        "warehouse-small" => WarehouseSize::Small,
        "warehouse-medium" => WarehouseSize::Medium,
        "warehouse-large" => WarehouseSize::Large,
        _ => return None,
    };
    Some(warehouse(size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movingai_basics() {
        let open = parse_movingai("type octile\nheight 3\nwidth 3\nmap\n...\n...\n...\n", "o").unwrap();
        assert_eq!(open.num_vertices(), 9);
        assert_eq!(open.task_spots().len(), 9);
        let walled = parse_movingai("type octile\nheight 3\nwidth 3\nmap\n...\n.@.\n...\n", "w").unwrap();
        assert_eq!(walled.num_vertices(), 8);
        assert!(!walled.is_passable(Coord::new(1, 1)));
        let mixed = parse_movingai("type octile\nheight 1\nwidth 5\nmap\n.GOT@\n", "m").unwrap();
        assert_eq!(mixed.num_vertices(), 2);
    }

    #[test]
    fn movingai_errors_name_the_position() {
        let cases = [
            ("type octile\nheight 2\nwidth 3\nmap\n...\n.x.\n", (6, 2)),
            ("type octile\nheight 2\nwidth 3\nmap\n...\n..\n", (6, 3)),
            ("type octile\nheight 3\nwidth 3\nmap\n...\n...\n", (7, 1)),
            ("type octile\nheight two\nwidth 3\nmap\n", (2, 8)),
            ("type octile\nheight 1\nwidth 2\nmap\n@@\n", (1, 1)),
            ("height 1\nwidth 1\nmap\n.\n", (1, 1)),
        ];
        for (text, (line, col)) in cases {
            match parse_movingai(text, "bad") {
                Err(MapError::Parse { line: l, col: c, .. }) => assert_eq!((l, c), (line, col), "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn json_and_builtin_maps() {
        let m = builtin("warehouse-small").unwrap();
        let back = parse_map(&to_json(&m), "ignored").unwrap();
        assert_eq!(back, m);
        let text = to_movingai(&m);
        let plain = parse_map(&text, m.name()).unwrap();
        assert_eq!(plain.passable_mask(), m.passable_mask());
        assert!(builtin("warehouse-huge").is_none());
        assert!(matches!(load_map("/nonexistent/x.map"), Err(MapError::Io { .. })));
    }
}
