use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use guess_core::experiment::{self, Ablation, RunConfig, RunOptions};
use guess_core::losses::BlockMode;
use guess_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "guess", version, about = "Train and evaluate GUESS self-supervised ensembles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON with a .json extension); built-in
    /// defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<run id>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Ensemble size.
    #[arg(long, global = true)]
    blocks: Option<usize>,
    /// Write each block's correlation matrix as CSV after every epoch.
    #[arg(long, global = true)]
    dump_correlations: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ensemble,
    Efficient,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the autoencoders and save a checkpoint for `train`.
    PretrainAe,
    /// Train (resuming from a checkpoint in the output directory).
    Train,
    /// Evaluate the trained checkpoint in the output directory.
    Eval,
    /// Barlow Twins over the λ grid plus both reference-regularized losses.
    SweepLambda,
    /// GUESS over the β grid.
    SweepBeta,
    /// The baseline run plus the chosen ablations (all when none given).
    Ablate {
        #[arg(value_enum)]
        variants: Vec<AblationArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    DropAe,
    NoPretrain,
    SharedViews,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::DropAe => Ablation::DropAe,
            AblationArg::NoPretrain => Ablation::NoPretrain,
            AblationArg::SharedViews => Ablation::SharedViews,
        }
    }
}

fn resolve_config(common: &Common) -> guess_core::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(mode) = common.mode {
        config.train.mode = match mode {
            Mode::Ensemble => BlockMode::Ensemble,
            Mode::Efficient => BlockMode::Efficient,
        };
    }
    if let Some(blocks) = common.blocks {
        config.train.blocks = blocks;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli, config: RunConfig) -> guess_core::Result<()> {
    let out = match cli.common.out {
        Some(p) => p,
        None => PathBuf::from("runs").join(config.run_id()?),
    };
    let opts = RunOptions {
        dump_correlations: cli.common.dump_correlations,
    };
    match cli.command {
        Command::PretrainAe => {
            let run = experiment::pretrain(&config, &out)?;
            for (k, h) in run.state.pretrain_history.iter().enumerate() {
                if let (Some(first), Some(last)) = (h.first(), h.last()) {
                    println!("autoencoder {k}: reconstruction {first:.4} -> {last:.4}");
                }
            }
        }
        Command::Train => {
            let run = experiment::train(&config, &out, &opts)?;
            for block in run.blocks() {
                if let Some(last) = run.block_history(block.block_id).last() {
                    println!("block {} epoch {}: loss {:.6}", block.block_id, last.epoch, last.mean.total);
                }
            }
        }
        Command::Eval => print!("{}", experiment::eval(&config, &out)?.to_table()),
        Command::SweepLambda => print!("{}", experiment::sweep_lambda(&config, &out)?.to_table()),
        Command::SweepBeta => print!("{}", experiment::sweep_beta(&config, &out)?.to_table()),
        Command::Ablate { variants } => {
            let chosen: Vec<Ablation> = if variants.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                variants.into_iter().map(Ablation::from).collect()
            };
            print!("{}", experiment::ablate(&config, &chosen, &out)?.to_table());
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let config = match resolve_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            log::error!("run aborted");
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
