use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use dakr::checkpoint::{load_params, save_buffer, save_params, BufferFile, BUFFER_FILE, PARAMS_FILE};
use dakr::{ablate, config, export, report, CliError, CliResult};
use dakr_core::train::{evaluate, prepare_domains, EpochTrace, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dakr", version, about = "Continual segmentation with dual-alignment knowledge retention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic domain sequence (PGM images, masks, manifest).
    Gen {
        #[arg(long)]
        domains: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = RunConfig::default().image_size)]
        image_size: usize,
        #[arg(long, default_value_t = RunConfig::default().samples_per_domain)]
        samples: usize,
    },
    /// Train one run; writes result files, the parameters and the buffer.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the forgetting curves.
        #[arg(long)]
        svg: bool,
        /// No per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Run every cell of a grid (a JSON array of configs).
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the test split of every domain in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domains: PathBuf,
    },
    /// Aggregate the runs under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen { domains, seed, out, image_size, samples } => {
            let m = export::write_domains(&out, domains, seed, image_size, samples)?;
            println!("wrote {} domains x {} samples to {}", m.domains.len(), samples, out.display());
            Ok(())
        }
        Command::Train { config, out, svg, quiet } => train(&config, &out, svg, quiet),
        Command::Ablate { grid, out, parallel, svg, quiet } => run_ablation(&grid, &out, parallel, svg, quiet),
        Command::Eval { checkpoint, domains } => eval(&checkpoint, &domains),
        Command::Report { runs, svg } => {
            for p in report::report_dir(&runs, svg)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn log_epoch(prefix: &str, t: &EpochTrace) {
    eprintln!(
        "{}domain {} epoch {:>2} lr {:.2e} loss {:.4} (seg {:.4} rekd {:.4} cra {:.3e} cna {:.4}) val dice {:.4}",
        prefix,
        t.domain + 1,
        t.epoch + 1,
        t.lr,
        t.losses.total,
        t.losses.seg,
        t.losses.rekd,
        t.losses.cra,
        t.losses.cna,
        t.val_dice
    );
}

fn train(config_path: &Path, out: &Path, svg: bool, quiet: bool) -> CliResult<()> {
    let config = config::load_config(config_path)?;
    let domains = prepare_domains(&config)?;
    let output = ablate::run_cell(&config, &domains, &mut |t| {
        if !quiet {
            log_epoch("", t)
        }
    })?;
    report::write_run(&output.result, out, svg)?;
    save_params(&out.join(PARAMS_FILE), &config, &output.net)?;
    save_buffer(&out.join(BUFFER_FILE), &BufferFile::of(&output.buffer, config.image_size))?;
    let s = &output.result.dice_summary;
    println!("{}: Dice AVG {:.4} BWT {:.4} -> {}", output.result.signature, s.avg, s.bwt, out.display());
    Ok(())
}

fn run_ablation(grid: &Path, out: &Path, parallel: usize, svg: bool, quiet: bool) -> CliResult<()> {
    let cells = config::load_grid(grid)?;
    let stderr = Mutex::new(());
    let outputs = ablate::run_grid(&cells, parallel, &|i, t| {
        if !quiet {
            let _guard = stderr.lock();
            log_epoch(&format!("[cell {}] ", i), t);
        }
    })?;
    let results: Vec<_> = outputs.into_iter().map(|o| o.result).collect();
    report::write_report(&results, out, svg)?;
    for row in report::aggregate(&results)? {
        println!("{:<28} runs {} Dice AVG {:.4} BWT {:.4}", row.key, row.runs, row.means[0].0, row.means[0].1);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    domain: usize,
    samples: usize,
    dice: f64,
    iou: f64,
    hd95: f64,
}

fn eval(checkpoint: &Path, dir: &Path) -> CliResult<()> {
    let (config, net) = load_params(checkpoint)?;
    let (manifest, domains) = export::read_domains(dir)?;
    if manifest.image_size != config.image_size {
        return Err(CliError::Config(format!(
            "checkpoint expects {}px images, domains are {}px",
            config.image_size, manifest.image_size
        )));
    }
    let mut rows = Vec::with_capacity(domains.len());
    for (i, d) in domains.iter().enumerate() {
        let s = evaluate(&net, &d.test)?;
        rows.push(EvalRow { domain: i, samples: d.test.len(), dice: s.dice, iou: s.iou, hd95: s.hd95 });
    }
    println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    Ok(())
}
