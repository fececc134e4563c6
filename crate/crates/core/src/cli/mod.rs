//! Command-line harness.
//!
//! Every command builds a [`CommandOutput`]: text for standard output plus
//! named files written under `--out` when given. Nothing in either depends on
//! wall-clock time, so repeated runs are byte-identical.

pub mod commands;
pub mod config;
pub mod reproduce;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use config::ExperimentConfig;
pub use reproduce::{reproduce_rows, ReproRow, ReproStatus};

use crate::error::{GemError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MISMATCH: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "gem", version, about = "Routing, clustered attention, quantization and cost experiments")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for report, curve and plot-data files.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Standard-output format (default: table for reproduce, json otherwise).
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recompute every closed-form number and diff it against the printed value.
    Reproduce,
    /// Route token ids and log one decision per token.
    Route {
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<u32>>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Cluster embeddings, build the attention mask and count operations.
    Scar {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Quantizer error per bit-width and hybrid memory accounting.
    Quantize,
    /// GG, CDTR and DSI for the configured records.
    Metrics,
    /// Per-token cost of an architecture on a platform.
    Cost {
        #[arg(long)]
        platform: Option<String>,
    },
    /// Train the toy model on one synthetic domain task.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Plain versus distillation fine-tuning on a synthetic task pair.
    Forget {
        #[arg(long)]
        runs: Option<usize>,
    },
}

#[derive(Debug, Default)]
pub struct CommandOutput {
    pub stdout: String,
    pub files: Vec<(String, String)>,
    pub exit_code: i32,
}

pub fn exit_code_for(err: &GemError) -> i32 {
    match err {
        GemError::Divergence { .. } | GemError::NonFinite { .. } => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if let Err(e) = emit(&out, cli.out.as_deref()) {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
            out.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<CommandOutput> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let fmt = cli.format;
    match &cli.command {
        Command::Reproduce => commands::reproduce(fmt.unwrap_or(Format::Table)),
        Command::Route { tokens, tau } => {
            if let Some(t) = tokens {
                cfg.route.tokens = t.clone();
            }
            if let Some(t) = tau {
                cfg.route.router.tau = *t;
            }
            cfg.validate()?;
            commands::route(&cfg, fmt.unwrap_or(Format::Json))
        }
        Command::Scar { n, k } => {
            if let Some(n) = n {
                cfg.scar.n = *n;
            }
            if let Some(k) = k {
                cfg.scar.k = *k;
            }
            cfg.validate()?;
            commands::scar(&cfg, fmt.unwrap_or(Format::Json))
        }
        Command::Quantize => commands::quantize(&cfg, fmt.unwrap_or(Format::Json)),
        Command::Metrics => commands::metrics(&cfg, fmt.unwrap_or(Format::Json)),
        Command::Cost { platform } => {
            if let Some(p) = platform {
                cfg.cost.platform = p.clone();
            }
            cfg.validate()?;
            commands::cost(&cfg, fmt.unwrap_or(Format::Json))
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.train.epochs = *e;
            }
            commands::train(&cfg, fmt.unwrap_or(Format::Json))
        }
        Command::Forget { runs } => {
            if let Some(r) = runs {
                cfg.forget.runs = *r;
            }
            cfg.validate()?;
            commands::forget(&cfg, fmt.unwrap_or(Format::Json))
        }
    }
}

fn emit(out: &CommandOutput, dir: Option<&Path>) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        for (name, body) in &out.files {
            std::fs::write(dir.join(name), body)?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.stdout.as_bytes())?;
    stdout.flush()?;
    Ok(())
}
