//! `s2st`: corpus generation, training, translation, evaluation and
//! ablations from the command line.

mod commands;
mod config;
mod error;
mod files;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "s2st", version, about = "Direct speech-to-speech translation toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// Root seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory receiving every output and the run manifest.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Override one config key, e.g. `--set pipeline.model_train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

/// Flags mirroring the training configuration.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub decay_gamma: Option<f64>,
    #[arg(long = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lambda_audio: Option<f64>,
    #[arg(long)]
    pub lambda_text: Option<f64>,
}

impl TrainArgs {
    /// Config assignments under `prefix`, in flag order.
    pub fn assignments(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{prefix}.{k}={v}"));
            }
        };
        put("lr", self.lr.map(|v| format!("{v:?}")));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("warmup_steps", self.warmup_steps.map(|v| v.to_string()));
        put("decay_gamma", self.decay_gamma.map(|v| format!("{v:?}")));
        put("max_epochs", self.max_epochs.map(|v| v.to_string()));
        put("validate_every", self.validate_every.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("max_steps", self.max_steps.map(|v| v.to_string()));
        put("lambda_audio", self.lambda_audio.map(|v| format!("{v:?}")));
        put("lambda_text", self.lambda_text.map(|v| format!("{v:?}")));
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the seeded synthetic parallel corpus.
    GenCorpus(commands::GenCorpusArgs),
    /// Keep pairs whose similarity exceeds a threshold.
    Filter(commands::FilterArgs),
    /// Train the speech tokenizer and its symbol table.
    TrainTokenizer(commands::TrainTokenizerArgs),
    /// Turn a manifest's speech into semantic token files.
    Tokenize(commands::TokenizeArgs),
    /// Train the vocoder and the translation model on a trained tokenizer.
    TrainModel(commands::TrainModelArgs),
    /// Speech in, target text, tokens and speech out.
    Translate(commands::TranslateArgs),
    /// Vocode token files in the voice of a prompt.
    Synthesize(commands::SynthesizeArgs),
    /// Score hypotheses against references.
    Eval(commands::EvalArgs),
    /// Run an ablation suite (projectors or token-source).
    Ablate(commands::AblateArgs),
}

fn init_logging(g: &GlobalArgs) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        (false, _) => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.cmd {
        Command::GenCorpus(a) => commands::gen_corpus(g, a),
        Command::Filter(a) => commands::filter(g, a),
        Command::TrainTokenizer(a) => commands::train_tokenizer(g, a),
        Command::Tokenize(a) => commands::tokenize(g, a),
        Command::TrainModel(a) => commands::train_model(g, a),
        Command::Translate(a) => commands::translate(g, a),
        Command::Synthesize(a) => commands::synthesize(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Ablate(a) => commands::ablate(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(error::EXIT_USAGE as u8),
            };
        }
    };
    init_logging(&cli.global);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}
