//! The `mddm` executable: train, sample, eval and ablate.
//!
//! Exit codes are 0 on success, 2 for usage or configuration errors, 3 for
//! numerical failures and 4 for IO or file-format failures.

mod ablate;
mod artifacts;
mod eval;
mod sample;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;

pub use ablate::{ablation_variants, cmd_ablate, AblationGrid, COMPARISON_COLUMNS};
pub use artifacts::{render_pgm, report_text};
pub use eval::cmd_eval;
pub use sample::cmd_sample;
pub use train::{cmd_train, run_dir_for};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Format(_) | Error::Version { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mddm", version, about = "Multimodal masked discrete diffusion on a toy paired world")]
pub struct Cli {
    /// Worker threads; falls back to MDDM_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Joint,
    T2i,
    I2t,
    Prompted,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; the run directory is named by the config hash.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Generate pairs from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Space-separated condition ids, one condition per line; sample i
        /// uses line i modulo the line count.
        #[arg(long)]
        condition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// dist, consistency, recovery, text, nelbo or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Token-record file of packed pairs to score for consistency
        /// instead of generating.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Train the base model and ablated variants, then compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "causal")]
        grid: Vec<AblationGrid>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MDDM_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("MDDM_THREADS must be an integer, got '{v}'"))),
        _ => Ok(None),
    }
}

/// Parses `args` and runs the command.
pub fn run_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // Fails only if a pool already exists, e.g. when called twice in
        // one process; the existing pool is then reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            force,
        } => cmd_train(&config, &out, resume.as_deref(), force).map(|dir| {
            println!("{}", dir.display());
        }),
        Command::Sample {
            ckpt,
            mode,
            num,
            seed,
            condition,
            out,
        } => cmd_sample(&ckpt, mode, num, seed, condition.as_deref(), &out),
        Command::Eval {
            ckpt,
            suite,
            out,
            pairs,
        } => cmd_eval(&ckpt, &suite, &out, pairs.as_deref()),
        Command::Ablate { config, grid, out } => cmd_ablate(&config, &grid, &out),
    }
}

/// Reads and validates a config file. Unreadable files are reported as
/// configuration errors.
pub fn read_config(path: &std::path::Path) -> Result<crate::config::RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    crate::config::RunConfig::from_json(&text)
}
