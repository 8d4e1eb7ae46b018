//! Command-line harness: dataset generation, training, sweeps, theorem
//! verification, and attention export.
//!
//! Exit codes: 0 success, 1 property or metric failure (including training
//! divergence), 2 usage/config errors.

mod run;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "smooth-mil", version, about = "Smooth-operator MIL research harness")]
struct Cli {
    /// Worker threads (falls back to SMMIL_THREADS, then all cores).
    /// Results never depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a SynthSpec JSON config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
    },
    /// Train one model on one split; writes checkpoint, history, metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
    },
    /// Run a Cartesian sweep over declared axes and split ids.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
    },
    /// Run the randomized theorem-verification suites.
    Verify {
        #[arg(long, default_value_t = 20240)]
        seed: u64,
        /// Deliberately perturb the smooth operator output so the energy
        /// bound check fails (exercises the failure path).
        #[arg(long)]
        inject_fault: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-instance attention values for a trained run.
    ExportAttention {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SMMIL_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate { config, out } => run::generate(&config, &out),
        Command::Train { config, out } => run::train(&config, &out),
        Command::Sweep { config, out } => run::sweep(&config, &out),
        Command::Verify {
            seed,
            inject_fault,
            out,
        } => run::verify(seed, inject_fault, out.as_deref()),
        Command::ExportAttention { run, data, out } => {
            run::export_attention(&run, &data, &out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<run::UsageError>().map_or(1, |_| 2))
        }
    }
}
