//! Greedy and length-penalised beam decoding over any next-token scorer.

use std::cmp::Ordering;

use super::episode::EvalEpisode;
use crate::error::{Error, Result};
use crate::model::SemiCausalModel;
use crate::numerics::Real;
use crate::spans::SpanLayout;
use crate::textdata::{TokenId, EOD, EOP};

/// Tokens that end generation.
pub const STOP: [TokenId; 2] = [EOP, EOD];

/// Next-token log-probabilities given the tokens generated so far.
pub trait StepScorer {
    fn next_log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>>;

    fn is_stop(&self, token: TokenId) -> bool {
        STOP.contains(&token)
    }
}

/// Scores continuations of an episode with a model, re-running the full
/// prefix each call.
pub struct ModelScorer<'a, T: Real> {
    model: &'a SemiCausalModel<T>,
    episode: &'a EvalEpisode,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a SemiCausalModel<T>, episode: &'a EvalEpisode) -> Self {
        ModelScorer { model, episode }
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        let ep = self.episode;
        let mut ids = ep.ids[..ep.cutoff].to_vec();
        ids.extend_from_slice(generated);
        let layout = SpanLayout::new(ids.len(), ep.layout.spans().to_vec())?;
        let logits = self.model.logits(&ids, &layout)?;
        Ok(log_softmax(logits.row(ids.len() - 1)))
    }
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    let lz = max + z.ln();
    row.iter().map(|v| v.as_f64() - lz).collect()
}

/// Index of the largest entry, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Appends the most likely token until a stop token (kept in the output) or
/// `max_new` tokens.
pub fn greedy_decode(scorer: &mut impl StepScorer, max_new: usize) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    while out.len() < max_new {
        let lp = scorer.next_log_probs(&out)?;
        let tok = argmax(&lp) as TokenId;
        out.push(tok);
        if scorer.is_stop(tok) {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub size: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            size: 4,
            alpha: 0.6,
        }
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// Live and finished hypotheses of a running search.
#[derive(Clone, Debug)]
pub struct BeamState {
    pub config: BeamConfig,
    pub live: Vec<Hypothesis>,
    pub finished: Vec<Hypothesis>,
}

impl BeamState {
    fn best_finished(&self) -> Option<&Hypothesis> {
        let alpha = self.config.alpha;
        self.finished
            .iter()
            .fold(None, |best: Option<&Hypothesis>, h| match best {
                Some(b) if b.score(alpha) >= h.score(alpha) => Some(b),
                _ => Some(h),
            })
    }
}

/// Beam search with length penalty.
///
/// Each step ranks every one-token extension of the live hypotheses by raw
/// cumulative log-probability (ties: lower token id, then lower hypothesis
/// index) and walks that ranking: extensions ending in a stop token are
/// finished, others become live until `size` are live. The search ends once
/// `size` hypotheses are finished; at the last permitted step every ranked
/// extension is finished. The answer is the finished hypothesis with the best
/// length-normalised score, earliest on ties. With `size == 1` this is
/// exactly [`greedy_decode`].
pub fn beam_search(
    scorer: &mut impl StepScorer,
    config: BeamConfig,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    if config.size == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut state = BeamState {
        config,
        live: vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        }],
        finished: Vec::new(),
    };
    for step in 1..=max_new {
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
        for (h, hyp) in state.live.iter().enumerate() {
            let lp = scorer.next_log_probs(&hyp.tokens)?;
            cands.extend(
                lp.iter()
                    .enumerate()
                    .map(|(v, l)| (hyp.log_prob + l, v as TokenId, h)),
            );
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let last = step == max_new;
        let mut live = Vec::with_capacity(config.size);
        for (lp, tok, h) in cands {
            let mut tokens = state.live[h].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: lp,
            };
            if last || scorer.is_stop(tok) {
                state.finished.push(hyp);
            } else {
                live.push(hyp);
                if live.len() == config.size {
                    break;
                }
            }
        }
        state.live = live;
        if state.finished.len() >= config.size || state.live.is_empty() {
            break;
        }
    }
    Ok(state
        .best_finished()
        .map(|h| h.tokens.clone())
        .unwrap_or_default())
}
