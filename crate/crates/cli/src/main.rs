//! `adadiff`: phantom data generation, prior training, reconstruction,
//! ablation sweeps and evaluation.

mod commands;
mod config;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use adadiff_core::phantom::Split;
use adadiff_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Context;
use config::{ExperimentConfig, TrainVariant};

#[derive(Parser)]
#[command(name = "adadiff", version, about = "Adaptive adversarial-diffusion priors for undersampled MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mapper.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (overrides `output` and $ADADIFF_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Slice-level worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Force a single worker.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconVariantArg {
    Full,
    NoAdapt,
    NoTrain,
}

impl ReconVariantArg {
    fn key(self) -> &'static str {
        match self {
            ReconVariantArg::Full => "full",
            ReconVariantArg::NoAdapt => "no_adapt",
            ReconVariantArg::NoTrain => "no_train",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    GenData(Common),
    /// Train a prior.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<TrainVariant>,
        /// Continue from the checkpoint in the output directory, if present.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct one dataset split with a trained prior.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Prior checkpoint; defaults to the one `train` writes.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        variant: Option<ReconVariantArg>,
    },
    /// Train the ablation priors and compare all reconstruction variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `prior-<variant>/prior.bin` checkpoints to reuse.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score reconstruction directories against the dataset references.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "recon", required = true)]
        recon: Vec<PathBuf>,
    },
    /// Export the configured undersampling mask.
    Mask(Common),
}

fn context(common: &Common, extra: Vec<String>) -> Result<Context> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    Context::new(cfg, common.out.as_deref(), common.workers, common.reproducible)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => commands::gen_data(&context(&common, vec![])?),
        Command::Mask(common) => commands::mask(&context(&common, vec![])?),
        Command::Train { common, variant, resume } => {
            let extra = variant.map(|v| format!("train.variant=\"{}\"", v.name())).into_iter().collect();
            commands::train(&context(&common, extra)?, resume)
        }
        Command::Reconstruct {
            common,
            prior,
            split,
            variant,
        } => {
            let extra = variant.map(|v| format!("recon.variant=\"{}\"", v.key())).into_iter().collect();
            commands::reconstruct_cmd(&context(&common, extra)?, prior.as_deref(), split.into())
        }
        Command::Ablate { common, priors, split } => {
            commands::ablate(&context(&common, vec![])?, priors.as_deref(), split.into())
        }
        Command::Eval { common, recon } => commands::eval(&context(&common, vec![])?, &recon),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
