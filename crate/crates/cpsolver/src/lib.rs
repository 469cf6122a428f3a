//! File formats, external predictors, benchmark sweeps and configuration
//! for `cpsolver-core`, plus the `cpsolver` command-line tool.

pub mod bench;
pub mod config;
pub mod external;
pub mod formats;
pub mod mapio;
pub mod pipeline;
