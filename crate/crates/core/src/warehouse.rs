//! Generated warehouse-style maps.
//!
//! Shelf blocks are two rows thick and separated by open aisles. Each shelf
//! row has pick pockets carved into it: dead-end cells that open onto exactly
//! one aisle cell. The pockets are the task spots, so reserving one never cuts
//! an aisle.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grid::{Coord, GridMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarehouseSize {
    Small,
    Medium,
    Large,
}

impl WarehouseSize {
    pub fn name(self) -> &'static str {
        match self {
            WarehouseSize::Small => "warehouse-small",
            WarehouseSize::Medium => "warehouse-medium",
            WarehouseSize::Large => "warehouse-large",
        }
    }

    pub fn layout(self) -> WarehouseLayout {
        match self {
            WarehouseSize::Small => WarehouseLayout {
                bands: 6,
                blocks: 6,
                block_len: 10,
                aisle: 2,
            },
            WarehouseSize::Medium => WarehouseLayout {
                bands: 8,
                blocks: 8,
                block_len: 10,
                aisle: 2,
            },
            WarehouseSize::Large => WarehouseLayout {
                bands: 10,
                blocks: 12,
                block_len: 10,
                aisle: 2,
            },
        }
    }
}

impl FromStr for WarehouseSize {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "small" | "warehouse-small" => Ok(Self::Small),
            "medium" | "warehouse-medium" => Ok(Self::Medium),
            "large" | "warehouse-large" => Ok(Self::Large),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarehouseLayout {
    /// Shelf bands stacked vertically.
    pub bands: usize,
    /// Shelf blocks per band.
    pub blocks: usize,
    /// Length of one shelf block in cells (>= 4).
    pub block_len: usize,
    /// Aisle width in cells (>= 1).
    pub aisle: usize,
}

impl WarehouseLayout {
    pub fn dims(&self) -> (usize, usize) {
        let width = self.aisle + self.blocks * (self.block_len + self.aisle);
        let height = self.aisle + self.bands * (2 + self.aisle);
        (width, height)
    }

    pub fn build(&self, name: &str) -> GridMap {
        assert!(self.block_len >= 4 && self.aisle >= 1);
        let (width, height) = self.dims();
        let mut passable = vec![true; width * height];
        let mut spots = Vec::new();
        for band in 0..self.bands {
            let top = self.aisle + band * (2 + self.aisle);
            for block in 0..self.blocks {
                let left = self.aisle + block * (self.block_len + self.aisle);
                for dc in 0..self.block_len {
                    passable[top * width + left + dc] = false;
                    passable[(top + 1) * width + left + dc] = false;
                }
                // Pockets at odd offsets on the top row, even offsets on the
                // bottom row, never at a block's ends.
                for dc in 1..self.block_len - 1 {
                    let row = if dc % 2 == 1 { top } else { top + 1 };
                    passable[row * width + left + dc] = true;
                    spots.push(Coord::new(row, left + dc));
                }
            }
        }
        GridMap::new(name, width, height, passable, Some(spots)).expect("layout is valid")
    }
}

/// One of the three built-in warehouse maps.
pub fn warehouse(size: WarehouseSize) -> GridMap {
    size.layout().build(size.name())
}

/// Custom layout with a generated name.
pub fn custom_warehouse(layout: WarehouseLayout) -> GridMap {
    let name = format!(
        "warehouse-{}x{}-{}-{}",
        layout.bands, layout.blocks, layout.block_len, layout.aisle
    );
    layout.build(&name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pockets_are_dead_ends() {
        for size in [WarehouseSize::Small, WarehouseSize::Medium, WarehouseSize::Large] {
            let m = warehouse(size);
            assert!(m.is_connected(), "{size:?}");
            for &spot in m.task_spots() {
                // self + exactly one exit
                assert_eq!(m.neighbors(spot).unwrap().len(), 2, "{spot}");
            }
        }
    }

    #[test]
    fn small_dimensions() {
        let m = warehouse(WarehouseSize::Small);
        assert_eq!((m.width(), m.height()), (74, 26));
        assert_eq!(m.task_spots().len(), 6 * 6 * 8);
    }
}
