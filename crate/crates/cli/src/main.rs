use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::PredictInput;
use error::{CliError, CliResult};

/// Security patch detection from diffs, generated explanations and commit
/// messages.
#[derive(Debug, Parser)]
#[command(name = "patchfuse", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override any config key, e.g. `--set train.fusion=pooled_concat`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(flatten)]
    hp: HpFlags,

    #[command(subcommand)]
    command: Command,
}

/// Shorthands for `--set hyperparams.<name>=...`.
#[derive(Debug, Args)]
struct HpFlags {
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    batch_size_train: Option<usize>,
    #[arg(long, global = true)]
    batch_size_eval: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    margin: Option<f64>,
    #[arg(long, global = true)]
    num_heads: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
}

impl HpFlags {
    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let ints = [
            ("epochs", self.epochs),
            ("batch_size_train", self.batch_size_train),
            ("batch_size_eval", self.batch_size_eval),
            ("num_heads", self.num_heads),
            ("dim", self.dim),
            ("max_tokens", self.max_tokens),
        ];
        let floats = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("dropout", self.dropout),
            ("margin", self.margin),
        ];
        let key = |k: &str| format!("hyperparams.{k}");
        ints.iter()
            .filter_map(|(k, v)| v.map(|v| (key(k), toml::Value::Integer(v as i64))))
            .chain(floats.iter().filter_map(|(k, v)| v.map(|v| (key(k), toml::Value::Float(v)))))
            .collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the datasets, split them and write out/data.
    Ingest,
    /// Fill in explanations and write out/explained.
    Explain,
    /// Train and write checkpoints and the run log under out/train.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on every split; writes out/eval/metrics.json.
    Eval {
        /// Defaults to the best checkpoint of the last training run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Another dataset whose test split is scored as well.
        #[arg(long)]
        test_data: Vec<PathBuf>,
    },
    /// Print the probability and label for one patch.
    Predict {
        #[arg(long, conflicts_with = "record", required_unless_present = "record")]
        diff: Option<PathBuf>,
        /// Commit message accompanying `--diff`.
        #[arg(long, requires = "diff")]
        message: Option<String>,
        /// Id of a record in the ingested data.
        #[arg(long)]
        record: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export a 2-component PCA of the fused embeddings.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// all, train, validation or test.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train and score one run per ablation setting.
    Ablate {
        /// Replaces `ablate.runs`, e.g. `--runs no_sbcl --runs no_ptformer+no_sbcl`.
        #[arg(long)]
        runs: Vec<String>,
    },
}

fn overrides(cli: &Cli) -> CliResult<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        out.push((k.trim().to_string(), config::parse_value(v.trim())));
    }
    out.extend(cli.hp.overrides());
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} exceeds i64")))?;
        out.push(("seed".into(), toml::Value::Integer(seed)));
    }
    if let Some(dir) = &cli.out {
        let dir = std::path::absolute(dir).map_err(|e| CliError::io("resolve --out", e))?;
        out.push(("out".into(), toml::Value::String(dir.display().to_string())));
    }
    if let Command::Ablate { runs } = &cli.command {
        if !runs.is_empty() {
            let runs = runs.iter().map(|r| toml::Value::String(r.clone())).collect();
            out.push(("ablate.runs".into(), toml::Value::Array(runs)));
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let resolved = config::load(cli.config.as_deref(), &overrides(&cli)?)?;
    let r = &resolved;
    match cli.command {
        Command::Ingest => commands::ingest(r),
        Command::Explain => commands::explain(r),
        Command::Train { resume } => commands::train_cmd(r, resume.as_deref()),
        Command::Eval { checkpoint, test_data } => commands::eval(r, checkpoint.as_deref(), &test_data),
        Command::Predict {
            diff,
            message,
            record,
            checkpoint,
        } => {
            let input = match (diff, record) {
                (Some(path), _) => PredictInput::Diff { path, message },
                (None, Some(id)) => PredictInput::Record(id),
                (None, None) => return Err(CliError::Config("predict needs --diff or --record".into())),
            };
            commands::predict_cmd(r, checkpoint.as_deref(), input)
        }
        Command::Visualize { checkpoint, split } => commands::visualize(r, checkpoint.as_deref(), &split),
        Command::Ablate { .. } => commands::ablate(r),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail(&CliError::Config(e.to_string().trim_end().to_string())),
    };
    match run(cli) {
        Ok(summary) => {
            // a closed stdout (e.g. piped into `head`) is not an error
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string());
    eprintln!("{record}");
    ExitCode::from(e.exit_code() as u8)
}
