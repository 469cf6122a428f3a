//! Multi-agent path finding among uncontrolled agents, with conformal
//! prediction regions turned into time-indexed obstacles.
//!
//! The crate is `no_std` (with `alloc`). Clocks, files and external
//! processes live in the `cpsolver` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod grid;
pub mod mapf;
pub mod warehouse;
pub mod conformal;
pub mod prediction;
pub mod reference;
pub mod cp_solver;
pub mod sim;
