mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpfn_core::separation::ConditioningMode;
use dpfn_core::training::Phase;

#[derive(Parser, Debug)]
#[command(name = "dpfn", version, about = "Speaker-conditioned speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override values from `--config`.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (WAV files plus manifest).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unconditioned separator with the permutation-invariant loss.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the speaker-conditioned separator.
    TrainDpfn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: ConditioningMode,
        #[arg(long, default_value = "pretrain-clean", value_parser = parse_phase)]
        phase: Phase,
        /// First-stage separator; required by the finetune-separated phase.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        /// Checkpoint to initialize from (e.g. the pretrain-clean result).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `<speaker>.emb` files for the known-speaker phase.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Separate one mixture through the cascade and write one WAV per output.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mixture: PathBuf,
        /// Conditioned model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// First-stage separator; not needed when every filter is given by `--embedding`.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        /// External embedding files, one per speaker, used instead of the first stage.
        #[arg(long = "embedding")]
        embeddings: Vec<PathBuf>,
        /// Reference sources; when given, per-source scores are printed.
        #[arg(long = "reference")]
        references: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on corpus splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Conditioned model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        /// Comma-separated splits.
        #[arg(long, default_value = "dev,eval")]
        splits: String,
        /// Take the conditioned model's filters from the clean references instead of the first stage.
        #[arg(long)]
        enrolled: bool,
        /// Directory of `<speaker>.emb` files supplying the filters.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also score the references against themselves.
        #[arg(long)]
        oracle: bool,
        /// Write one JSON record per row to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the speaker filter of a clean recording as an embedding file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train on at most this many mixtures of the train split.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ConditioningMode, String> {
    s.parse().map_err(|e: dpfn_core::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: dpfn_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, &out),
        Command::TrainBaseline { common, train } => commands::train_baseline(&common, &train),
        Command::TrainDpfn {
            common,
            train,
            mode,
            phase,
            baseline_checkpoint,
            checkpoint,
            embeddings,
        } => commands::train_dpfn(
            &common,
            &train,
            mode,
            phase,
            baseline_checkpoint.as_deref(),
            checkpoint.as_deref(),
            embeddings.as_deref(),
        ),
        Command::Separate {
            common,
            mixture,
            checkpoint,
            baseline_checkpoint,
            embeddings,
            references,
            out,
        } => commands::separate(
            &common,
            &mixture,
            &checkpoint,
            baseline_checkpoint.as_deref(),
            &embeddings,
            &references,
            &out,
        ),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            baseline_checkpoint,
            splits,
            enrolled,
            embeddings,
            oracle,
            out,
        } => commands::evaluate(
            &common,
            &commands::EvalArgs {
                data,
                checkpoint,
                baseline_checkpoint,
                splits,
                enrolled,
                embeddings,
                oracle,
                out,
            },
        ),
        Command::Embed {
            common,
            input,
            checkpoint,
            out,
            label,
        } => commands::embed(&common, &input, &checkpoint, &out, label),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
