//! `sclm`: pretraining, finetuning, evaluation and inspection for
//! semi-causal language models.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{Generated, MaskVariant};
use config::{DecodeKind, RunConfig};
use semicausal::eval::KvVocab;

#[derive(Parser)]
#[command(
    name = "sclm",
    version,
    about = "Semi-causal language modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (and `SCLM_SEED`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    decode: Option<DecodeKind>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Semi-causal pretraining on a text corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus text: paragraphs on lines, documents separated by blank lines.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write the final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finetunes a checkpoint on a task file; writes `<name>-finetuned.scck` beside it.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
    },
    /// Zero-shot or k-shot evaluation of a checkpoint on a task file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Continues a text prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Renders an attention or information-flow mask as a grid.
    InspectMasks {
        #[arg(value_enum)]
        variant: MaskVariant,
        n: usize,
        /// Spans for the semicausal variant, e.g. "[2,4) [6,8)".
        #[arg(long)]
        layout: Option<String>,
        /// Bidirectional prefix length for the prefix variant.
        #[arg(long, default_value_t = 0)]
        prefix: usize,
    },
    /// Writes seeded synthetic corpora and task files.
    Generate {
        #[arg(value_enum)]
        what: Generated,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Documents or episodes to write.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Pairs per document/episode (demonstrations for classification).
        #[arg(long, default_value_t = 2)]
        demos: usize,
        /// Extra recalls of earlier pairs per kv-corpus document.
        #[arg(long, default_value_t = 2)]
        repeats: usize,
        /// Characters keys are drawn from.
        #[arg(long, default_value = "abcdefghijklmnopqrstuvwxyz")]
        keys: String,
        #[arg(long, default_value_t = 2)]
        key_len: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.override_seed(common.seed)?;
    Ok(cfg)
}

fn apply_eval_flags(cfg: &mut RunConfig, flags: &EvalFlags) {
    let e = &mut cfg.eval;
    e.k = flags.k.unwrap_or(e.k);
    e.decode = flags.decode.unwrap_or(e.decode);
    e.beam_size = flags.beam_size.unwrap_or(e.beam_size);
    e.alpha = flags.alpha.unwrap_or(e.alpha);
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain {
            common,
            corpus,
            checkpoint,
        } => commands::pretrain(
            &load_config(&common)?,
            corpus.as_deref(),
            checkpoint.as_deref(),
        ),
        Command::Finetune {
            common,
            checkpoint,
            task,
        } => commands::finetune(
            &load_config(&common)?,
            checkpoint.as_deref(),
            task.as_deref(),
        ),
        Command::Eval {
            common,
            checkpoint,
            task,
            flags,
        } => {
            let mut cfg = load_config(&common)?;
            apply_eval_flags(&mut cfg, &flags);
            commands::eval(&cfg, checkpoint.as_deref(), task.as_deref())
        }
        Command::Sample {
            common,
            checkpoint,
            prompt,
            max_new,
            flags,
        } => {
            let mut cfg = load_config(&common)?;
            apply_eval_flags(&mut cfg, &flags);
            commands::sample(&cfg, checkpoint.as_deref(), &prompt, max_new)
        }
        Command::InspectMasks {
            variant,
            n,
            layout,
            prefix,
        } => commands::inspect_masks(variant, n, layout.as_deref(), prefix),
        Command::Generate {
            what,
            out,
            seed,
            count,
            demos,
            repeats,
            keys,
            key_len,
        } => {
            let vocab = KvVocab {
                key_chars: keys,
                key_len,
                ..KvVocab::default()
            };
            commands::generate(what, seed, count, demos, repeats, &vocab, &out)
        }
    }
}

/// Failure classes, each with its own exit code.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use semicausal::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ("missing-file", 3),
                E::Parse(_) => ("parse", 4),
                E::Version { .. } => ("version", 5),
                E::Format(_) | E::Integrity(_) => ("corrupt", 6),
                E::Dimension(_) | E::Contract(_) | E::Registry(_) => ("invalid", 7),
                E::NonFinite(_) => ("non-finite", 8),
                E::Io(_) => ("io", 9),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                ("missing-file", 3)
            } else {
                ("io", 9)
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return ("parse", 4);
        }
    }
    ("internal", 1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (kind, code) = classify(&err);
            let msg = format!("{err:#}").replace(['\n', '\r'], " ");
            eprintln!("error kind={kind} code={code} message={msg:?}");
            ExitCode::from(code)
        }
    }
}
