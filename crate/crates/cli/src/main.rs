use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2d_core::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "s2d", version, about = "Selective spectral decay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set s2d.tau=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-tensor PCDR and spectral audit of a checkpoint.
    Audit {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        /// Calibration seed; defaults to the config's calibration seed.
        #[arg(long)]
        calib_seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Also report mean PCDR_1 over this percentage of largest activations.
        #[arg(long)]
        top_percent: Option<f64>,
        /// Audit only these tensors. Repeatable.
        #[arg(long = "tensor")]
        tensors: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train one regime, writing a checkpoint and a run report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Post-training quantization of a checkpoint at one bit setting.
    Quantize {
        checkpoint: PathBuf,
        /// Bit setting such as `W4A4`.
        #[arg(long, short)]
        bits: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        calib_seed: Option<u64>,
        #[arg(long)]
        calib_samples: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Side-by-side deltas of two run reports; exits 3 when a paired check fails.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// One run per cell of a parameter grid plus a summary CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept key and values, e.g. `--grid s2d.n=2,3,4`. Repeatable.
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        #[arg(long, short, default_value = "sweep")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Failure carrying its process exit status.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Usage(String),
    Directions,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Diverged { .. } | Error::NonFinite { .. } | Error::SvdNoConvergence { .. }) => 2,
            Failure::Core(_) | Failure::Usage(_) => 1,
            Failure::Directions => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Audit {
            checkpoint,
            config,
            k_max,
            calib_seed,
            batch_size,
            top_percent,
            tensors,
            out,
        } => commands::audit(commands::AuditArgs {
            checkpoint,
            config: config.config,
            set: config.set,
            k_max,
            calib_seed,
            batch_size,
            top_percent,
            tensors,
            out,
        }),
        Command::Train { config, out_dir } => commands::train(config.config, &config.set, &out_dir),
        Command::Quantize {
            checkpoint,
            bits,
            config,
            calib_seed,
            calib_samples,
            out,
        } => commands::quantize(commands::QuantizeArgs {
            checkpoint,
            bits,
            config: config.config,
            set: config.set,
            calib_seed,
            calib_samples,
            out,
        }),
        Command::Compare { a, b, json } => commands::compare(&a, &b, json.as_deref()),
        Command::Sweep {
            config,
            grid,
            out_dir,
            jobs,
        } => commands::sweep(config.config, &config.set, &grid, &out_dir, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Directions => eprintln!("acceptance directions failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
