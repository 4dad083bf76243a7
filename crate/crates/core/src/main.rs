use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textgan::io::experiment::ExperimentConfig;
use textgan::pipeline::{Stage, Workspace};

#[derive(Parser)]
#[command(name = "textgan", version, about = "Transformer LM, Gumbel-Softmax text GAN and augmented fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this seed for every stage.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the language model on the corpus.
    TrainLm(Common),
    /// Train the generator and discriminator.
    TrainGan(Common),
    /// Sample synthetic text from the trained generator.
    Synthesize(Common),
    /// Merge real and synthetic text and fine-tune the language model.
    AugmentFinetune(Common),
    /// Held-out perplexity and next-token accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate instead of the output directory's lm.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every comparison plan and write the report.
    Compare(Common),
    /// Run every stage enabled in [stages], in order.
    Pipeline(Common),
}

fn run(cli: Cli) -> textgan::Result<()> {
    let (common, stage, checkpoint) = match cli.command {
        Command::TrainLm(c) => (c, Some(Stage::TrainLm), None),
        Command::TrainGan(c) => (c, Some(Stage::TrainGan), None),
        Command::Synthesize(c) => (c, Some(Stage::Synthesize), None),
        Command::AugmentFinetune(c) => (c, Some(Stage::AugmentFinetune), None),
        Command::Eval { common, checkpoint } => (common, Some(Stage::Eval), checkpoint),
        Command::Compare(c) => (c, Some(Stage::Compare), None),
        Command::Pipeline(c) => (c, None, None),
    };
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed_override {
        config.override_seeds(seed);
    }
    let out = common.out.unwrap_or_else(|| config.paths.out_dir.clone());
    let ws = Workspace::open(&config, &out)?;
    let mut stdout = std::io::stdout().lock();
    match stage {
        Some(Stage::Eval) => ws.eval(checkpoint.as_deref(), &mut stdout),
        Some(stage) => ws.run(stage, &mut stdout),
        None => ws.run_pipeline(&mut stdout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
