//! Ablation grids: many configs over one shared domain sequence.

use std::time::Instant;

use dakr_core::hsic::KernelSpec;
use dakr_core::segnet::Tap;
use dakr_core::train::{prepare_domains, train_continual, DomainData, EpochTrace, RunConfig, RunOutput};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};

/// Cells must agree on everything that defines the domain sequence.
pub fn check_consistent(cells: &[RunConfig]) -> CliResult<()> {
    let first = cells.first().ok_or_else(|| CliError::Config("grid has no cells".into()))?;
    let key = |c: &RunConfig| (c.domains, c.samples_per_domain, c.image_size, c.data_seed);
    for (i, c) in cells.iter().enumerate() {
        if key(c) != key(first) {
            return Err(CliError::Config(format!(
                "cell {} uses a different domain sequence (domains, samples, size, data seed) {:?} vs {:?}",
                i,
                key(c),
                key(first)
            )));
        }
    }
    Ok(())
}

/// One run with its wall-clock time filled in.
pub fn run_cell(
    config: &RunConfig,
    domains: &[DomainData],
    observer: &mut dyn FnMut(&EpochTrace),
) -> CliResult<RunOutput> {
    let start = Instant::now();
    let mut out = train_continual(config, domains, observer)?;
    out.result.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    Ok(out)
}

/// Run every cell on a pool of `parallel` threads; outputs keep the grid order.
/// `progress` receives the cell index with every epoch trace.
pub fn run_grid(
    cells: &[RunConfig],
    parallel: usize,
    progress: &(dyn Fn(usize, &EpochTrace) + Sync),
) -> CliResult<Vec<RunOutput>> {
    for (i, c) in cells.iter().enumerate() {
        c.validate().map_err(|e| CliError::Config(format!("cell {}: {}", i, e)))?;
    }
    check_consistent(cells)?;
    if parallel == 0 {
        return Err(CliError::Usage("--parallel must be at least 1".into()));
    }
    let domains = prepare_domains(&cells[0])?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {}", e)))?;
    pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_cell(c, &domains, &mut |t| progress(i, t)))
            .collect()
    })
}

/// Grid of the standard ablations over `seeds`, all derived from `base`:
/// SEQ, the regularizer subsets, tap layers B and C, a buffer of 10 and the
/// fixed scaled-form bandwidths 0.1, 0.01 and 0.001. Each cell is labelled.
pub fn standard_grid(base: &RunConfig, seeds: &[u64]) -> Vec<RunConfig> {
    let full = RunConfig { rekd: true, cra: true, cna: true, feature_pairing: true, ..base.clone() };
    let toggles = [
        (false, false, false, false),
        (true, false, false, false),
        (true, true, false, false),
        (true, true, false, true),
        (true, false, true, false),
        (true, true, true, false),
        (true, true, true, true),
    ];
    let mut variants: Vec<RunConfig> = toggles
        .iter()
        .map(|&(rekd, cra, cna, feature_pairing)| {
            let c = RunConfig { rekd, cra, cna, feature_pairing, ..full.clone() };
            RunConfig { label: Some(c.signature()), ..c }
        })
        .collect();
    for (tap, name) in [(Tap::B, "B"), (Tap::C, "C")] {
        variants.push(RunConfig { tap, label: Some(format!("REKD+CRA+CNA tap={}", name)), ..full.clone() });
    }
    variants.push(RunConfig { buffer_capacity: 10, label: Some("REKD+CRA+CNA buffer=10".into()), ..full.clone() });
    for sigma in [0.1, 0.01, 0.001] {
        variants.push(RunConfig {
            kernel: KernelSpec::scaled(sigma),
            label: Some(format!("REKD+CRA+CNA sigma={}", sigma)),
            ..full.clone()
        });
    }
    seeds.iter().flat_map(|&seed| variants.iter().map(move |v| RunConfig { seed, ..v.clone() })).collect()
}
