//! Run configs and ablation grids as JSON. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use dakr_core::train::RunConfig;

use crate::error::{CliError, CliResult};

pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// A grid is a JSON array of configs, each validated on its own.
pub fn parse_grid(text: &str) -> CliResult<Vec<RunConfig>> {
    let cells: Vec<RunConfig> = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if cells.is_empty() {
        return Err(CliError::Config("grid has no cells".into()));
    }
    for (i, c) in cells.iter().enumerate() {
        c.validate().map_err(|e| CliError::Config(format!("cell {}: {}", i, e)))?;
    }
    Ok(cells)
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| prefix(path, e))
}

pub fn load_grid(path: &Path) -> CliResult<Vec<RunConfig>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_grid(&text).map_err(|e| prefix(path, e))
}

pub fn to_json(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("configs always serialize")
}

fn prefix(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
        CliError::Core(dakr_core::Error::Config(m)) => CliError::Config(format!("{}: {}", path.display(), m)),
        other => other,
    }
}
