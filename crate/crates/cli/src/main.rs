mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "clinalign", version, about = "Measurement/note alignment pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config layered over the built-in defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: $CLINALIGN_OUT/<command> or runs/<command>].
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Dataset directory (with splits.json).
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Tokenizer file [default: tokenizer.json next to the checkpoint].
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its split manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Normalize an on-disk dataset into a new directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive + masked-reconstruction pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Grid search over pretraining hyperparameters, scored by validation R@1.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluation protocols.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Print a checkpoint's config, tensor count and metadata.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Cross-modal retrieval recall at 1/5/10.
    Retrieval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Mortality scoring against two anchor phrases.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Linear probe on frozen measurement features.
    Linear {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Fine-tuning on label fractions, pretrained vs random initialization.
    Semisup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated label percentages, e.g. 1,10,50,100.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<u32>>,
    },
}

fn context<'a>(name: &'a str, common: &'a Common) -> clinalign::error::Result<Context<'a>> {
    let cfg = config::resolve(common.config.as_deref(), &common.overrides)?;
    Ok(Context {
        command: name,
        config_path: common.config.as_deref(),
        overrides: &common.overrides,
        cfg,
        out: config::out_dir(common.out.clone(), name),
    })
}

fn run(cli: Cli) -> clinalign::error::Result<()> {
    match &cli.command {
        Command::Generate { common } => commands::generate(&context("generate", common)?),
        Command::Ingest { common, data } => commands::ingest_cmd(&context("ingest", common)?, data),
        Command::Pretrain { common, data, resume, stop_after } => {
            commands::pretrain_cmd(&context("pretrain", common)?, data, resume.as_deref(), *stop_after)
        }
        Command::Gridsearch { common, data } => commands::gridsearch(&context("gridsearch", common)?, data),
        Command::Eval { which } => {
            let m = |a: &ModelArgs| (a.data.clone(), a.checkpoint.clone(), a.tokenizer.clone());
            match which {
                EvalCommand::Retrieval { common, model } => {
                    let (d, c, t) = m(model);
                    commands::eval_retrieval(&context("eval-retrieval", common)?, &d, c.as_deref(), t.as_deref())
                }
                EvalCommand::Zeroshot { common, model } => {
                    let (d, c, t) = m(model);
                    commands::eval_zeroshot(&context("eval-zeroshot", common)?, &d, c.as_deref(), t.as_deref())
                }
                EvalCommand::Linear { common, model } => {
                    let (d, c, t) = m(model);
                    commands::eval_linear(&context("eval-linear", common)?, &d, c.as_deref(), t.as_deref())
                }
                EvalCommand::Semisup { common, model, fractions } => {
                    let (d, c, t) = m(model);
                    let ctx = context("eval-semisup", common)?;
                    commands::eval_semisup(&ctx, &d, c.as_deref(), t.as_deref(), fractions.as_deref())
                }
            }
        }
        Command::InspectCheckpoint { path } => commands::inspect_checkpoint(Path::new(path)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME };
            let kind = if code == EXIT_CONFIG { "config" } else { "runtime" };
            eprintln!("error: {e}");
            eprintln!("{}", serde_json::json!({ "status": "error", "kind": kind, "exit_code": code, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
