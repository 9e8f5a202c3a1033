use crate::error::{Error, Result};
use crate::spans::{Span, SpanLayout};
use crate::textdata::{TokenId, BOS, EOP};

/// An assembled evaluation sequence: `<s>`, then each demonstration as an
/// encoded input span followed by its label tokens and `</s>`, then the
/// encoded test input. Generation continues right after the test span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalEpisode {
    pub ids: Vec<TokenId>,
    /// One span per demonstration input, then one for the test input.
    pub layout: SpanLayout,
    pub gold: Vec<TokenId>,
    /// 1-based position of the last prompt token; decoding predicts `cutoff + 1` first.
    pub cutoff: usize,
}

impl EvalEpisode {
    pub fn with_gold(mut self, gold: Vec<TokenId>) -> Self {
        self.gold = gold;
        self
    }

    /// 1-based positions of demonstration label tokens.
    pub fn label_positions(&self) -> Vec<usize> {
        let spans = self.layout.spans();
        spans
            .windows(2)
            .flat_map(|w| w[0].end..w[1].start)
            .filter(|p| self.ids[p - 1] != EOP)
            .collect()
    }
}

/// Builds a k-shot episode. A non-empty `prompt` is placed inside the test
/// span ahead of the test input, the zero-shot instruction slot.
pub fn build_icl_episode(
    demos: &[(Vec<TokenId>, Vec<TokenId>)],
    test_input: &[TokenId],
    k: usize,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<EvalEpisode> {
    if demos.len() != k {
        return Err(Error::Contract(format!(
            "k={k} but {} demonstrations given",
            demos.len()
        )));
    }
    if test_input.is_empty() && prompt.is_empty() {
        return Err(Error::Contract("empty test input".into()));
    }
    let mut ids = vec![BOS];
    let mut spans = Vec::with_capacity(k + 1);
    for (i, (input, label)) in demos.iter().enumerate() {
        if input.is_empty() || label.is_empty() {
            return Err(Error::Contract(format!(
                "demonstration {i} has an empty input or label"
            )));
        }
        spans.push(Span::new(ids.len() + 1, ids.len() + 1 + input.len()));
        ids.extend_from_slice(input);
        ids.extend_from_slice(label);
        ids.push(EOP);
    }
    let start = ids.len() + 1;
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(test_input);
    spans.push(Span::new(start, ids.len() + 1));
    // Room for at least one generated token.
    if ids.len() >= max_len {
        return Err(Error::Dimension(format!(
            "episode of {} tokens leaves no room under {max_len}",
            ids.len()
        )));
    }
    let cutoff = ids.len();
    let layout = SpanLayout::new(cutoff, spans)?;
    Ok(EvalEpisode {
        ids,
        layout,
        gold: Vec::new(),
        cutoff,
    })
}
