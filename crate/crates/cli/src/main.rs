//! `cinetext`: generate synthetic cine datasets, pretrain, finetune, embed,
//! evaluate and export attention maps.
//!
//! Exit codes: 0 success, 1 contract or configuration error, 2 missing input.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cinetext", version, about = "Contrastive video-text pretraining on synthetic cine studies")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by every training command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; absent keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pretrain.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Validate a dataset directory and its splits.
    Check(CheckArgs),
    /// Contrastive pretraining of both encoders.
    Pretrain(PretrainArgs),
    /// Train a downstream regression or classification head.
    Finetune(FinetuneArgs),
    /// Frozen joint-space embedding of every video.
    Embed(EmbedArgs),
    /// Evaluation statistics on prediction or embedding files.
    Eval(EvalArgs),
    /// Export encoder attention maps and per-view head attention for one study.
    Attn(AttnArgs),
    /// Finetune from every checkpoint of a pretraining run.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of studies.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flag prevalence override, e.g. `--prevalence low_ef=0.3`. Repeatable.
    #[arg(long, value_name = "LABEL=P")]
    prevalence: Vec<String>,
    /// Study-level train:val:test fractions.
    #[arg(long, default_value = "0.5:0.25:0.25", value_name = "A:B:C")]
    split: String,
    /// Frames per rendered clip.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory; its training split is used.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for checkpoints, loss log and run manifest.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for metrics, predictions, attention weights and the model.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Checkpoint directory with encoder weights; random initialization when omitted.
    #[arg(long, value_name = "DIR")]
    init: Option<PathBuf>,
    /// lvef_regression or disease_classification.
    #[arg(long, default_value = "lvef_regression")]
    task: String,
    /// finetune, transfer or frozen (overrides finetune.freeze_mode).
    #[arg(long, value_name = "MODE")]
    freeze_mode: Option<String>,
    /// Fraction of training studies used (overrides finetune.data_fraction).
    #[arg(long, value_name = "F")]
    data_fraction: Option<f64>,
    /// Classification label (overrides finetune.label).
    #[arg(long, value_name = "LABEL")]
    label: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint directory; random initialization when omitted.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Output directory for `embeddings.csv` and `run.json`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(subcommand)]
    what: EvalCommand,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// AUROC with DeLong interval from a `study_id,score,label` CSV.
    Roc {
        #[arg(long, value_name = "CSV")]
        pred: PathBuf,
        /// Metrics JSON; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Also write the ROC curve as `fpr,tpr` CSV.
        #[arg(long, value_name = "PATH")]
        curve: Option<PathBuf>,
    },
    /// MAE, MSE and Bland-Altman limits from a `study_id,pred,truth` CSV.
    Agreement {
        #[arg(long, value_name = "CSV")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Paired DeLong test of two score CSVs over the same studies.
    Compare {
        #[arg(long, value_name = "CSV")]
        a: PathBuf,
        #[arg(long, value_name = "CSV")]
        b: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Two-dimensional t-SNE of an embeddings CSV.
    Tsne {
        #[arg(long, value_name = "CSV")]
        embeddings: PathBuf,
        /// Coordinates CSV `id,x,y`.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Average the videos of each study first.
        #[arg(long)]
        per_study: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gradient iterations.
        #[arg(long, default_value_t = 500)]
        iters: usize,
    },
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    /// Checkpoint directory; a downstream model also yields per-view head weights.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Study id.
    #[arg(long)]
    study: String,
    /// Restrict to one view tag such as `4CH` or `SAX1`.
    #[arg(long)]
    view: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Pretraining output directory holding `checkpoints/`.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Output CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Fraction of training studies used per finetune.
    #[arg(long, default_value_t = 0.1)]
    data_fraction: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let r = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Check(a) => commands::check(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a.what),
        Command::Attn(a) => commands::attn(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
