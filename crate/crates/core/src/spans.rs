//! Non-causal span layouts and the target bookkeeping of the semi-causal
//! objective.
//!
//! Positions here are 1-based: position 1 is the `<s>` token, position `n` is
//! the last token. A span `[s, e)` covers tokens `x_s .. x_{e-1}`.
//!
//! The objective sums, for each causal segment `i = 0..=k`, the log-likelihood
//! of `x_t` for `t` from `e_i` through `s_{i+1}` (with `e_0 = 1`,
//! `s_{k+1} = n`). Position 1 is never a target. Equivalently, every position
//! except `<s>` and the strict interior `s_i+1 .. e_i-1` of each span is a
//! target, and target `t` is always scored from decoder position `t - 1`: for
//! `t = e_i` that is the span's last position.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textdata::{PackedSequence, RegionKind};

/// Half-open 1-based span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }

    /// The same tokens as 0-based row indices.
    pub fn rows(&self) -> Range<usize> {
        self.start - 1..self.end - 1
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// Sorted, disjoint spans over a length-`n` sequence. Never covers position 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpanLayout {
    n: usize,
    spans: Vec<Span>,
}

impl SpanLayout {
    pub fn empty(n: usize) -> Self {
        SpanLayout {
            n,
            spans: Vec::new(),
        }
    }

    pub fn new(n: usize, spans: Vec<Span>) -> Result<Self> {
        let mut prev_end = 2;
        for s in &spans {
            if s.is_empty() {
                return Err(Error::contract(format!("empty span {s}")));
            }
            if s.start < prev_end {
                return Err(Error::contract(format!(
                    "span {s} overlaps, is unsorted, or covers position 1"
                )));
            }
            if s.end > n + 1 {
                return Err(Error::dim(format!("span {s} runs past position {n}")));
            }
            prev_end = s.end;
        }
        Ok(SpanLayout { n, spans })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn covered(&self) -> usize {
        self.spans.iter().map(Span::len).sum()
    }

    /// Index of the span containing 1-based `pos`.
    pub fn span_at(&self, pos: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.contains(pos))
    }

    /// Checks the layout against a packed sequence: matching length, and every
    /// span inside a single document region with no padding.
    pub fn validate_for(&self, seq: &PackedSequence) -> Result<()> {
        if seq.len() != self.n {
            return Err(Error::dim(format!(
                "layout for n={} applied to a length-{} sequence",
                self.n,
                seq.len()
            )));
        }
        for s in &self.spans {
            let rows = s.rows();
            let region = seq
                .region_of(rows.start)
                .ok_or_else(|| Error::contract(format!("span {s} starts outside every region")))?;
            if region.kind != RegionKind::Document || rows.end > region.end {
                return Err(Error::contract(format!(
                    "span {s} crosses a document boundary or padding"
                )));
            }
        }
        Ok(())
    }

    /// Strict interiors `s_i+1 .. e_i-1`: positions whose own token is never scored.
    pub fn interior_positions(&self) -> Vec<usize> {
        self.spans.iter().flat_map(|s| s.start + 1..s.end).collect()
    }

    /// Every position that carries a log-likelihood term, ascending.
    pub fn target_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        let mut spans = self.spans.iter().peekable();
        for t in 2..=self.n {
            while spans.peek().is_some_and(|s| s.end <= t) {
                spans.next();
            }
            let interior = spans.peek().is_some_and(|s| s.start < t && t < s.end);
            if !interior {
                out.push(t);
            }
        }
        out
    }

    /// Target positions whose token is not padding.
    pub fn supervised_positions(&self, seq: &PackedSequence) -> Vec<usize> {
        self.target_positions()
            .into_iter()
            .filter(|t| !seq.is_pad(t - 1))
            .collect()
    }

    pub fn is_target(&self, t: usize) -> bool {
        (2..=self.n).contains(&t) && !self.spans.iter().any(|s| s.start < t && t < s.end)
    }

    /// Decoder position whose output scores target `t`.
    pub fn prediction_source(&self, t: usize) -> Result<usize> {
        if !self.is_target(t) {
            return Err(Error::contract(format!("position {t} is not a target")));
        }
        // For t = e_i this is e_i - 1, the span's last position.
        Ok(t - 1)
    }

    /// Parses `"[s1,e1) [s2,e2) ..."`.
    pub fn parse(n: usize, text: &str) -> Result<Self> {
        let mut spans = Vec::new();
        for tok in text.split_whitespace() {
            let inner = tok
                .strip_prefix('[')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| Error::Parse(format!("span `{tok}` is not of the form [s,e)")))?;
            let (a, b) = inner
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("span `{tok}` lacks a comma")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("`{tok}`: {e}")))
            };
            spans.push(Span::new(parse(a)?, parse(b)?));
        }
        SpanLayout::new(n, spans)
    }
}

impl fmt::Display for SpanLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.spans.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// One inspection line: `"seq_idx: [s1,e1) [s2,e2) ..."`.
pub fn format_layout_line(seq_idx: usize, layout: &SpanLayout) -> String {
    if layout.is_empty() {
        format!("{seq_idx}:")
    } else {
        format!("{seq_idx}: {layout}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Target fraction of non-pad tokens to place in spans.
    pub ratio: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ratio: 0.25,
            min_len: 8,
            max_len: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleReport {
    /// Span-token budget, `floor(ratio * non_pad_len)`.
    pub budget: usize,
    pub covered: usize,
    pub shortfall: usize,
    pub attempts: usize,
    pub rejections: usize,
}

/// Greedy rejection sampler for span layouts.
///
/// Each draw picks a length uniformly from `[min_len, min(max_len, remaining)]`
/// and a start uniformly among positions where a span of that length stays in
/// one document region, avoids padding and position 1. The draw is rejected if
/// it touches an existing span or leaves no causal token between them.
/// Sampling stops when the remaining budget is below `min_len` or after
/// `10 * k` draws, `k` being the expected span count.
pub fn sample_spans<R: Rng + ?Sized>(
    seq: &PackedSequence,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(SpanLayout, SampleReport)> {
    let n = seq.len();
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(Error::contract(format!(
            "span ratio {} outside [0, 1)",
            cfg.ratio
        )));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.max_len >= n {
        return Err(Error::contract(format!(
            "span lengths [{}, {}] invalid for n={n}",
            cfg.min_len, cfg.max_len
        )));
    }
    let budget = (cfg.ratio * seq.non_pad_len() as f64).floor() as usize;
    let mean_len = (cfg.min_len + cfg.max_len) as f64 / 2.0;
    let expected = ((budget as f64) / mean_len).ceil().max(1.0) as usize;
    let max_attempts = 10 * expected;

    // Eligible 0-based runs: document regions minus the <s> row.
    let runs: Vec<Range<usize>> = seq
        .doc_spans
        .iter()
        .filter(|r| r.kind == RegionKind::Document)
        .map(|r| r.start.max(1)..r.end)
        .filter(|r| !r.is_empty())
        .collect();

    let mut chosen: Vec<Range<usize>> = Vec::new();
    let mut covered = 0;
    let mut attempts = 0;
    let mut rejections = 0;
    while attempts < max_attempts {
        let remaining = budget - covered;
        if remaining < cfg.min_len {
            break;
        }
        attempts += 1;
        let len = rng.random_range(cfg.min_len..=cfg.max_len.min(remaining));
        let slots: usize = runs.iter().map(|r| (r.len() + 1).saturating_sub(len)).sum();
        if slots == 0 {
            rejections += 1;
            continue;
        }
        let mut pick = rng.random_range(0..slots);
        let mut start = 0;
        for r in &runs {
            let here = (r.len() + 1).saturating_sub(len);
            if pick < here {
                start = r.start + pick;
                break;
            }
            pick -= here;
        }
        let end = start + len;
        // At least one causal token must separate neighbouring spans.
        if chosen.iter().any(|c| start <= c.end && c.start <= end) {
            rejections += 1;
            continue;
        }
        chosen.push(start..end);
        covered += len;
    }
    chosen.sort_by_key(|r| r.start);
    let spans = chosen
        .iter()
        .map(|r| Span::new(r.start + 1, r.end + 1))
        .collect();
    let layout = SpanLayout::new(n, spans)?;
    let report = SampleReport {
        budget,
        covered,
        shortfall: budget - covered,
        attempts,
        rejections,
    };
    Ok((layout, report))
}
