//! `pga` — command-line front end for the pixel-graph-attention toolkit.
//!
//! Subcommands: `bench-graphgen` (fast generator vs. dense oracle),
//! `verify` (correctness suites), `train` (toy re-identification run),
//! `sweep` (depth or neighborhood ablations), `dump-attention`
//! (per-layer attention maps for one sample). Every run creates a
//! timestamped directory under `--out` holding the effective config and
//! the command's artifacts.
//!
//! Exit codes: 0 on success, 1 on verification or runtime failure, 2 on
//! configuration errors (including command-line misuse).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::SweepAxis;
use config::RunConfig;
use pga_core::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Application-level failure, split by exit code.
#[derive(Debug)]
pub enum AppError {
    /// Bad configuration: unknown keys, unparsable values, impossible
    /// shapes, missing files named on the command line. Exit code 2.
    Config(String),
    /// A command started and failed: verification found a defect, or a
    /// numeric/IO error surfaced mid-run. Exit code 1.
    Runtime(String),
}

impl AppError {
    fn config(msg: String) -> Self {
        AppError::Config(msg)
    }

    fn runtime<S: Into<String>>(msg: S) -> Self {
        AppError::Runtime(msg.into())
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => AppError::Config(msg),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pga",
    version,
    about = "Pixel-graph attention toolkit: benchmarks, verification, toy training, sweeps"
)]
struct Cli {
    /// Flat key=value config file ('#' starts a comment); flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the `seed` config key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the `out` config key (parent of per-run directories).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time grid-graph generation against the dense oracle across a size ladder.
    BenchGraphgen,
    /// Run the graph, attention, and gradient verification suites.
    Verify {
        /// Deliberately corrupt one adjacency structure to prove the
        /// suite catches and names it (the run then exits nonzero).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train the toy re-identification model and evaluate retrieval.
    Train,
    /// Train the model across one ablation axis, several seeds per setting.
    Sweep {
        /// Which axis to ablate.
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Write per-layer attention maps of one sample as sparse CSV.
    DumpAttention {
        /// Checkpoint file written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Index into the dataset regenerated from the config.
        #[arg(long, value_name = "IDX", default_value_t = 0)]
        sample: usize,
    },
}

impl Command {
    fn slug(&self) -> &'static str {
        match self {
            Command::BenchGraphgen => "bench-graphgen",
            Command::Verify { .. } => "verify",
            Command::Train => "train",
            Command::Sweep { .. } => "sweep",
            Command::DumpAttention { .. } => "dump-attention",
        }
    }
}

/// Builds `<out>/<command>-<UTC timestamp>`, suffixing `-2`, `-3`, … if
/// a same-second run already claimed the name.
fn create_run_dir(out: &Path, slug: &str) -> Result<PathBuf, AppError> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{slug}-{stamp}");
    let mut dir = out.join(&base);
    let mut attempt = 1usize;
    while dir.exists() {
        attempt += 1;
        dir = out.join(format!("{base}-{attempt}"));
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| AppError::runtime(format!("cannot create run dir {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), AppError> {
    let cfg = load_config(cli)?;
    let run_dir = create_run_dir(&cfg.out, cli.command.slug())?;
    println!("run directory: {}", run_dir.display());
    let echo = cfg.echo();
    std::fs::write(run_dir.join("config.txt"), &echo)
        .map_err(|e| AppError::runtime(format!("cannot write config echo: {e}")))?;

    match &cli.command {
        Command::BenchGraphgen => commands::cmd_bench_graphgen(&cfg, &run_dir),
        Command::Verify { inject_fault } => commands::cmd_verify(&cfg, &run_dir, *inject_fault),
        Command::Train => commands::cmd_train(&cfg, &run_dir),
        Command::Sweep { axis } => commands::cmd_sweep(&cfg, &run_dir, *axis),
        Command::DumpAttention { checkpoint, sample } => {
            commands::cmd_dump_attention(&cfg, &run_dir, checkpoint, *sample)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
