//! Command-line driver: every subcommand reads and writes files in the
//! dataset layout described in [`files`].

mod commands;
mod error;
pub mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Grid;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "suplid",
    version,
    about = "Superpixel LID guidance for pixel-wise OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert between SLTF and PPM/PGM by file extension.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment one image into SLIC superpixels (i32 label map).
    Superpixels {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the per-class coreset from a labeled training directory.
    BuildCoreset {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a score map per image (higher means in-distribution).
    Score {
        #[arg(long)]
        coreset: PathBuf,
        #[arg(long)]
        inputs_dir: PathBuf,
        /// Directory holding the `*_image` files, if not `--inputs-dir`.
        #[arg(long)]
        images_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write `*_pred.pgm`, flagging pixels scored below tau.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Pixel-pooled AUROC, AUPR, FPR@95TPR, and best F1.
    Eval {
        #[arg(long)]
        scores_dir: PathBuf,
        #[arg(long)]
        masks_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_image: bool,
    },
    /// Generate synthetic train/test fixtures from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        train: u64,
        #[arg(long, default_value_t = 4)]
        test: u64,
    },
    /// Evaluate a grid of confidence x guidance x coreset combinations.
    Ablate {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("SUPLID_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("SUPLID_THREADS={v:?} is not a count")))?;
        // A pool may already exist when running in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Convert { input, output } => commands::convert(&input, &output),
        Command::Superpixels { image, out, config } => {
            commands::superpixels(&image, &out, &files::load_config(config.as_deref())?)
        }
        Command::BuildCoreset {
            train_dir,
            out,
            config,
        } => commands::build(&train_dir, &out, &files::load_config(config.as_deref())?),
        Command::Score {
            coreset,
            inputs_dir,
            images_dir,
            out_dir,
            config,
            tau,
        } => commands::score(
            &commands::ScoreArgs {
                coreset: &coreset,
                inputs_dir: &inputs_dir,
                images_dir: images_dir.as_deref(),
                out_dir: &out_dir,
                tau,
            },
            &files::load_config(config.as_deref())?,
        ),
        Command::Eval {
            scores_dir,
            masks_dir,
            out,
            per_image,
        } => commands::eval(&scores_dir, &masks_dir, &out, per_image),
        Command::Synth {
            spec,
            out_dir,
            train,
            test,
        } => commands::synth(&spec, &out_dir, train, test),
        Command::Ablate {
            train_dir,
            test_dir,
            out,
            grid,
            config,
        } => {
            let grid = match grid {
                Some(p) => files::read_json(&p)?,
                None => Grid::default(),
            };
            commands::ablate(
                &commands::AblateArgs {
                    train_dir: &train_dir,
                    test_dir: &test_dir,
                    grid,
                    out: &out,
                },
                &files::load_config(config.as_deref())?,
            )
        }
    }
}

/// Runs one invocation; `args` includes the program name. Returns the exit
/// code: 0 on success, 1 for input or validation errors, 2 for broken
/// invariants.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
