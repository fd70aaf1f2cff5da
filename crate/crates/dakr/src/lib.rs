//! File formats, ablation runner and reporting on top of `dakr-core`.
//!
//! * [`config`]: JSON run configs and ablation grids.
//! * [`checkpoint`]: binary parameter and replay-buffer files.
//! * [`export`]: synthetic domains on disk (PGM images, manifest).
//! * [`report`]: run JSON, metric CSVs, aggregate tables and SVG curves.
//! * [`ablate`]: grid runner over configs sharing one domain sequence.

pub mod ablate;
pub mod checkpoint;
pub mod config;
mod error;
pub mod export;
pub mod report;

pub use error::{CliError, CliResult};
