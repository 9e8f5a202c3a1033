use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semicausal::eval::{
    decode_episode, evaluate, finetune_items, gen_kv_corpus, gen_kv_recall, gen_toy_classify,
    read_tasks, strip_stop, write_tasks, EvalEpisode, EvalSpec, KvVocab, TaskEpisode,
};
use semicausal::masks::{causal_mask, noncausal_mask, prefix_mask, semicausal_flow};
use semicausal::model::SemiCausalModel;
use semicausal::spans::SpanLayout;
use semicausal::textdata::{decode, encode, pack_corpus, parse_corpus, BOS};
use semicausal::training::{Checkpoint, TrainItem, TrainOptions, Trainer};
use semicausal::Error;
use serde::Serialize;

use crate::config::RunConfig;

fn require<'a>(
    flag: Option<&'a Path>,
    fallback: Option<&'a PathBuf>,
    what: &str,
) -> Result<&'a Path> {
    match flag.or(fallback.map(PathBuf::as_path)) {
        Some(p) => Ok(p),
        None => Err(semicausal::Error::Contract(format!(
            "no {what} given (flag or [paths] entry)"
        ))
        .into()),
    }
}

/// `<path>.<suffix>` next to `path`.
fn beside(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    result: R,
}

fn write_report<R: Serialize>(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    result: R,
) -> Result<()> {
    let env = Envelope {
        command,
        seed: cfg.seed,
        config_sha256: cfg.checksum(),
        config: cfg,
        result,
    };
    let text = serde_json::to_string_pretty(&env)?;
    fs::write(path, text + "\n").with_context(|| format!("writing report {}", path.display()))
}

/// Loads a checkpoint written by this tool together with the run config it embeds.
pub fn load_model(path: &Path) -> Result<(RunConfig, SemiCausalModel<f32>, Checkpoint)> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = RunConfig::parse(&ck.config)
        .map_err(|e| semicausal::Error::Format(format!("checkpoint config unreadable: {e}")))?;
    let mut model = SemiCausalModel::new(cfg.model.clone(), cfg.seed)?;
    ck.restore_params(model.params_mut())?;
    Ok((cfg, model, ck))
}

fn run_trainer(
    trainer: Trainer,
    items: &[TrainItem],
    steps: u64,
    cfg: &RunConfig,
    out: &Path,
    command: &str,
) -> Result<String> {
    let mut trainer = trainer.with_provenance(cfg.canonical());
    let opts = TrainOptions {
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| beside(out, "steps")),
        checkpoint_every: cfg.train.checkpoint_every,
        log_every: cfg.train.log_every,
    };
    let report = trainer.run(items, steps, &opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    trainer.checkpoint().save(out)?;
    let report_path = beside(out, "report.json");
    write_report(&report_path, command, cfg, &report)?;
    Ok(format!(
        "{command} steps={} final_loss={:.6} mean_coverage={:.4} checkpoint={} report={} config_sha256={} seed={}\n",
        report.steps.len(),
        report.final_loss().unwrap_or(f64::NAN),
        report.mean_coverage(),
        out.display(),
        report_path.display(),
        cfg.checksum(),
        cfg.seed,
    ))
}

pub fn pretrain(
    cfg: &RunConfig,
    corpus: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<String> {
    let corpus = require(corpus, cfg.paths.corpus.as_ref(), "corpus")?;
    let out = require(
        checkpoint,
        cfg.paths.checkpoint.as_ref(),
        "output checkpoint",
    )?;
    let text = fs::read_to_string(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    let docs = parse_corpus(&text);
    let packing = pack_corpus(&docs, cfg.model.decoder.max_len)?;
    if packing.sequences.is_empty() {
        bail!(semicausal::Error::Contract(format!(
            "corpus {} holds no text",
            corpus.display()
        )));
    }
    info!(
        "packed {} documents into {} sequences",
        docs.len(),
        packing.sequences.len()
    );
    let items: Vec<TrainItem> = packing
        .sequences
        .into_iter()
        .map(TrainItem::sequence)
        .collect();
    let trainer = Trainer::new(cfg.pretrain_config(), cfg.train.policy, cfg.seed)?;
    run_trainer(trainer, &items, cfg.train.steps, cfg, out, "pretrain")
}

fn load_tasks(path: &Path) -> Result<Vec<TaskEpisode>> {
    let f =
        fs::File::open(path).with_context(|| format!("opening task file {}", path.display()))?;
    read_tasks(BufReader::new(f)).with_context(|| format!("reading task file {}", path.display()))
}

pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>, task: Option<&Path>) -> Result<String> {
    let input = require(checkpoint, cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let task = require(task, cfg.paths.task.as_ref(), "task file")?;
    let (_, model, _) = load_model(input)?;
    let tasks = load_tasks(task)?;
    let mut run_cfg = cfg.clone();
    // The architecture always comes from the checkpoint being tuned.
    run_cfg.model = model.config().clone();
    let items = finetune_items(
        &tasks,
        &run_cfg.finetune.prompt,
        run_cfg.model.decoder.max_len,
    )?;
    let trainer = Trainer::with_model(
        run_cfg.finetune_config(),
        model,
        run_cfg.finetune.policy,
        run_cfg.seed,
    )?;
    let stem = input.file_stem().unwrap_or_default().to_string_lossy();
    let out = input.with_file_name(format!("{stem}-finetuned.scck"));
    run_trainer(
        trainer,
        &items,
        run_cfg.finetune.steps,
        &run_cfg,
        &out,
        "finetune",
    )
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, task: Option<&Path>) -> Result<String> {
    let input = require(checkpoint, cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let task = require(task, cfg.paths.task.as_ref(), "task file")?;
    let (_, model, _) = load_model(input)?;
    let tasks = load_tasks(task)?;
    let e = &cfg.eval;
    let spec = EvalSpec {
        k: e.k,
        prompt: e.prompt.clone(),
        decoding: e.decoding(),
        max_new: e.max_new,
    };
    let name = task
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let report = evaluate(&model, &name, &tasks, &spec)?;
    let report_path = beside(input, &format!("eval-{name}-k{}.json", e.k));
    write_report(&report_path, "eval", cfg, &report)?;
    Ok(format!(
        "{}{} config_sha256={} seed={} report={}\n",
        report.table(),
        report.machine_line(),
        cfg.checksum(),
        cfg.seed,
        report_path.display()
    ))
}

pub fn sample(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    prompt: &str,
    max_new: usize,
) -> Result<String> {
    let input = require(checkpoint, cfg.paths.checkpoint.as_ref(), "checkpoint")?;
    let (_, model, _) = load_model(input)?;
    let mut ids = vec![BOS];
    ids.extend(encode(prompt));
    let cutoff = ids.len();
    let episode = EvalEpisode {
        layout: SpanLayout::empty(cutoff),
        ids,
        gold: Vec::new(),
        cutoff,
    };
    let out = decode_episode(&model, &episode, cfg.eval.decoding(), max_new)?;
    Ok(format!("{}\n", decode(strip_stop(&out))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskVariant {
    Causal,
    Noncausal,
    Prefix,
    Semicausal,
}

pub fn inspect_masks(
    variant: MaskVariant,
    n: usize,
    layout: Option<&str>,
    prefix: usize,
) -> Result<String> {
    let mask = match variant {
        MaskVariant::Causal => causal_mask(n)?,
        MaskVariant::Noncausal => noncausal_mask(n)?,
        MaskVariant::Prefix => prefix_mask(n, prefix)?,
        MaskVariant::Semicausal => semicausal_flow(&SpanLayout::parse(n, layout.unwrap_or(""))?)?,
    };
    Ok(mask.render())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Generated {
    /// Pretraining corpus of key→value paragraphs with repeats.
    KvCorpus,
    /// Key→value recall episodes (JSON lines).
    KvRecall,
    /// Two-class a/b majority episodes (JSON lines).
    ToyClassify,
}

pub fn generate(
    what: Generated,
    seed: u64,
    count: usize,
    demos: usize,
    repeats: usize,
    vocab: &KvVocab,
    out: &Path,
) -> Result<String> {
    if vocab.key_chars.is_empty() || vocab.key_len == 0 {
        return Err(Error::Contract("keys need a non-empty alphabet and length".into()).into());
    }
    if what != Generated::ToyClassify && demos.max(1) > vocab.distinct_keys() {
        return Err(Error::Contract(format!(
            "{demos} pairs need more than {} distinct keys",
            vocab.distinct_keys()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::new();
    match what {
        Generated::KvCorpus => {
            for doc in gen_kv_corpus(&mut rng, vocab, count, demos.max(1), repeats) {
                buf.extend_from_slice(doc.join("\n").as_bytes());
                buf.extend_from_slice(b"\n\n");
            }
        }
        Generated::KvRecall => write_tasks(
            &mut buf,
            &gen_kv_recall(&mut rng, vocab, demos.max(1), count),
        )?,
        Generated::ToyClassify => write_tasks(&mut buf, &gen_toy_classify(&mut rng, count, demos))?,
    }
    fs::write(out, &buf).with_context(|| format!("writing {}", out.display()))?;
    Ok(format!("wrote {count} records to {}\n", out.display()))
}
