use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod error;

use error::AppError;

#[derive(Parser)]
#[command(
    name = "hcl",
    about = "Blind corruption-mask detection and image restoration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corrupted-image dataset with a manifest.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Corruption-ratio range as LO:HI, e.g. 0.1:0.4.
        #[arg(long, default_value = "0.1:0.4")]
        ratio: String,
        /// Corrupted-region content: constant, uniform, or image.
        #[arg(long, default_value = "image")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Alpha-blend band width in pixels at mask boundaries.
        #[arg(long, default_value_t = 0)]
        blend_band: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory containing manifest.tsv.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Total step target (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect the corruption mask of one image.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Finest-stage mask output (P5).
        #[arg(long)]
        out_mask: PathBuf,
        /// Also write every stage's mask into this directory.
        #[arg(long)]
        emit_scales: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore one image blindly.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Restored image output (P6).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate detection and restoration quality over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report output file (key value lines).
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData {
            out,
            count,
            size,
            ratio,
            noise,
            seed,
            blend_band,
        } => commands::gen_data(&out, count, size, &ratio, &noise, seed, blend_band),
        Command::Train {
            data,
            config,
            out,
            steps,
            seed,
            resume,
        } => commands::train(&data, config.as_deref(), &out, steps, seed, resume.as_deref()),
        Command::Detect {
            ckpt,
            image,
            out_mask,
            emit_scales,
            seed,
        } => commands::detect(&ckpt, &image, &out_mask, emit_scales.as_deref(), seed),
        Command::Inpaint {
            ckpt,
            image,
            out,
            seed,
        } => commands::inpaint(&ckpt, &image, &out, seed),
        Command::Eval {
            ckpt,
            data,
            report,
            seed,
        } => commands::eval(&ckpt, &data, &report, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
