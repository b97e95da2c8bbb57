mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dosegan", version, about = "Segmentation-guided style GAN for low-dose volume translation")]
pub struct Cli {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory or file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Divide every phase budget by this factor.
    #[arg(long, global = true)]
    pub scale: Option<u32>,
    /// Print the documented default configuration and exit.
    #[arg(long)]
    pub config_reference: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        drf: Option<u32>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the alternating training schedule.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from `latest.sgck` in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Translate one low-dose volume in test mode.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Summary table path; the full document is written next to it as `.txt`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck,
    /// Convert a metrics document.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tsv)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Tsv,
    Text,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
