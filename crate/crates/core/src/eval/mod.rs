//! Evaluation: episode assembly, decoding, metrics and synthetic tasks.

mod decode;
mod episode;
mod metrics;
mod tasks;

pub use decode::{
    beam_search, greedy_decode, length_penalty, log_softmax, BeamConfig, BeamState, Hypothesis,
    ModelScorer, StepScorer, STOP,
};
pub use episode::{build_icl_episode, EvalEpisode};
pub use metrics::{exact_match, strip_stop, token_f1};
pub use tasks::{
    gen_kv_corpus, gen_kv_recall, gen_toy_classify, read_tasks, solvable_by_lookup, write_tasks,
    Demo, KvVocab, TaskEpisode, CLASS_LABELS,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SemiCausalModel;
use crate::numerics::Real;
use crate::spans::{Span, SpanLayout};
use crate::textdata::{decode as detok, encode, pack_examples, TokenId};
use crate::training::TrainItem;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Beam(BeamConfig),
}

impl std::fmt::Display for Decoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decoding::Greedy => f.write_str("greedy"),
            Decoding::Beam(b) => write!(f, "beam(B={},alpha={})", b.size, b.alpha),
        }
    }
}

/// How episodes are assembled and decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Demonstrations shown per episode (the first `k` of each record).
    pub k: usize,
    /// Instruction text placed inside the test span; used only when `k == 0`.
    pub prompt: String,
    pub decoding: Decoding,
    /// Generation budget; defaults to the longest gold answer plus a stop token.
    pub max_new: Option<usize>,
}

/// Assembles the model-facing episode for one task record.
pub fn episode_for(task: &TaskEpisode, spec: &EvalSpec, max_len: usize) -> Result<EvalEpisode> {
    if task.demos.len() < spec.k {
        return Err(Error::Contract(format!(
            "k={} but the record has {} demonstrations",
            spec.k,
            task.demos.len()
        )));
    }
    let demos: Vec<(Vec<TokenId>, Vec<TokenId>)> = task.demos[..spec.k]
        .iter()
        .map(|d| (encode(&d.input), encode(&d.label)))
        .collect();
    let prompt = if spec.k == 0 {
        encode(&spec.prompt)
    } else {
        Vec::new()
    };
    Ok(
        build_icl_episode(&demos, &encode(&task.test_input), spec.k, &prompt, max_len)?
            .with_gold(encode(&task.gold)),
    )
}

/// Runs the chosen decoder on one episode; the result keeps any stop token.
pub fn decode_episode<T: Real>(
    model: &SemiCausalModel<T>,
    episode: &EvalEpisode,
    decoding: Decoding,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let room = model
        .config()
        .decoder
        .max_len
        .saturating_sub(episode.cutoff);
    let mut scorer = ModelScorer::new(model, episode);
    match decoding {
        Decoding::Greedy => greedy_decode(&mut scorer, max_new.min(room)),
        Decoding::Beam(b) => beam_search(&mut scorer, b, max_new.min(room)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub prediction: String,
    pub gold: String,
    pub exact_match: f64,
    pub token_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub k: usize,
    pub decoding: String,
    pub episodes: usize,
    pub exact_match: f64,
    pub token_f1: f64,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    /// Plain-text metrics table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>3} {:<22} {:>8} {:>8} {:>8}",
            "task", "k", "decoding", "episodes", "EM", "F1"
        );
        let _ = writeln!(
            s,
            "{:<16} {:>3} {:<22} {:>8} {:>8.4} {:>8.4}",
            self.task, self.k, self.decoding, self.episodes, self.exact_match, self.token_f1
        );
        s
    }

    /// One `key=value` line for scripts.
    pub fn machine_line(&self) -> String {
        format!(
            "metrics task={} k={} decoding={} episodes={} em={:.6} f1={:.6}",
            self.task, self.k, self.decoding, self.episodes, self.exact_match, self.token_f1
        )
    }
}

/// Scores every record in order; prediction text excludes the stop token.
pub fn evaluate<T: Real>(
    model: &SemiCausalModel<T>,
    task_name: &str,
    tasks: &[TaskEpisode],
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let max_new = spec
        .max_new
        .unwrap_or_else(|| tasks.iter().map(|t| t.gold.len()).max().unwrap_or(0) + 1);
    let max_len = model.config().decoder.max_len;
    let mut predictions = Vec::with_capacity(tasks.len());
    for (index, task) in tasks.iter().enumerate() {
        let ep = episode_for(task, spec, max_len)?;
        let out = decode_episode(model, &ep, spec.decoding, max_new)?;
        let pred = strip_stop(&out);
        predictions.push(Prediction {
            index,
            prediction: detok(pred),
            gold: task.gold.clone(),
            exact_match: exact_match(pred, &ep.gold),
            token_f1: token_f1(pred, &ep.gold),
        });
    }
    let n = predictions.len().max(1) as f64;
    Ok(EvalReport {
        task: task_name.to_owned(),
        k: spec.k,
        decoding: spec.decoding.to_string(),
        episodes: predictions.len(),
        exact_match: predictions.iter().map(|p| p.exact_match).sum::<f64>() / n,
        token_f1: predictions.iter().map(|p| p.token_f1).sum::<f64>() / n,
        predictions,
    })
}

/// Finetuning sequences: each record becomes `prompt+input` (encoded span)
/// followed by its gold answer and `</s>`, packed into length-`n` sequences.
/// The answer and its closing `</s>` are scored so decoding learns to stop.
pub fn finetune_items(tasks: &[TaskEpisode], prompt: &str, n: usize) -> Result<Vec<TrainItem>> {
    let examples: Vec<(Vec<TokenId>, Vec<TokenId>)> = tasks
        .iter()
        .map(|t| {
            let mut input = encode(prompt);
            input.extend(encode(&t.test_input));
            (input, encode(&t.gold))
        })
        .collect();
    let packing = pack_examples(&examples, n)?;
    if let Some(r) = packing.rejected.first() {
        return Err(Error::Dimension(format!(
            "task record {} needs {} tokens, more than fit in {n}",
            r.example, r.len
        )));
    }
    packing
        .sequences
        .into_iter()
        .map(|packed| {
            let spans = packed
                .slots
                .iter()
                .filter(|s| !s.input.is_empty())
                .map(|s| Span::new(s.input.start + 1, s.input.end + 1));
            let layout = SpanLayout::new(packed.sequence.len(), spans.collect())?;
            // 1-based positions of the answer and the `</s>` right after it.
            let targets = packed
                .slots
                .iter()
                .flat_map(|s| s.target.start + 1..=s.target.end + 1)
                .collect();
            Ok(TrainItem {
                seq: packed.sequence,
                layout: Some(layout),
                targets: Some(targets),
            })
        })
        .collect()
}
