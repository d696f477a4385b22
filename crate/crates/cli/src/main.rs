mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "merfuse", version, about = "Semi-supervised multimodal emotion recognition")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by every subcommand; each wins over the matching config key.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel fold trainers.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Held-out manifest scored by the fold ensemble.
    #[arg(long, global = true)]
    pub test_data: Option<PathBuf>,
    /// Self-training rounds.
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    /// Pseudo-labels per class and round.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Modality dropout probability during training.
    #[arg(long, global = true)]
    pub modality_dropout: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Share of evaluated samples with one modality zeroed.
    #[arg(long, global = true)]
    pub missing_fraction: Option<f64>,
    /// Use the offline mock chat backend.
    #[arg(long, global = true)]
    pub mock: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature or video dataset.
    GenData {
        /// Feature-set spec (JSON).
        #[arg(long, conflicts_with = "videos", required_unless_present = "videos")]
        spec: Option<PathBuf>,
        /// Video-set spec (JSON) for the prompt encoder.
        #[arg(long)]
        videos: Option<PathBuf>,
    },
    /// Train one model on a stratified train/validation split.
    Train,
    /// K-fold cross-validation; writes one model per fold.
    Cv,
    /// Iterative pseudo-label self-training.
    SelfTrain,
    /// Score a labeled manifest with a fold ensemble.
    Eval {
        /// Directory holding fold*.mmc checkpoints.
        #[arg(long)]
        models: PathBuf,
    },
    /// Predict every sample of a manifest with a fold ensemble.
    Predict {
        #[arg(long)]
        models: PathBuf,
    },
    /// Train deep prompts on a frozen dual encoder.
    PromptTrain,
    /// Export prompt-encoder video embeddings as a feature dataset.
    PromptExport {
        /// Prompt-bank checkpoint written by prompt-train.
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Prefix transcripts with a chat-model emotion ranking.
    AugmentText {
        /// JSON lines of {"id", "text"}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Cross-validate across modality-dropout rates 0, 0.15, 0.3 and 0.5.
    SweepDropout,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train => "train",
            Command::Cv => "cv",
            Command::SelfTrain => "self-train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::PromptTrain => "prompt-train",
            Command::PromptExport { .. } => "prompt-export",
            Command::AugmentText { .. } => "augment-text",
            Command::SweepDropout => "sweep-dropout",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = config::RunConfig::resolve(&cli.flags)?;
    match &cli.command {
        Command::GenData { spec, videos } => {
            commands::gen_data(&config, cli.flags.seed, spec.as_deref(), videos.as_deref())
        }
        Command::Train => commands::train(&config),
        Command::Cv => commands::cv(&config),
        Command::SelfTrain => commands::self_train(&config),
        Command::Eval { models } => commands::eval(&config, models),
        Command::Predict { models } => commands::predict(&config, models),
        Command::PromptTrain => commands::prompt_train(&config),
        Command::PromptExport { prompts } => commands::prompt_export(&config, prompts),
        Command::AugmentText { input } => commands::augment_text(&config, input),
        Command::SweepDropout => commands::sweep_dropout(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": {
                    "command": cli.command.name(),
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
