//! The semi-causal stack: span encoders, connectors, and a causal decoder
//! whose output softmax reuses the input token embedding.
//!
//! Decoder input row `p` is the token embedding of `x_p` for causal positions
//! and the connected encoder output for span positions; sinusoidal positions
//! are added to every row afterwards. Token embeddings are drawn with
//! standard deviation `d^-1/2` and scaled by `sqrt(d)` on input, so tokens and
//! positions enter the residual stream at comparable magnitude. The decoder always runs under the causal
//! mask, so bidirectionality enters only through the encoded spans.

mod config;
mod encoder;
mod flow;
mod layers;
mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    ConnectorKind, DecoderConfig, EncoderConfig, InputKind, ModalityConfig, ModelConfig,
};
pub use encoder::{EncoderInput, Payload};
pub use flow::FlowReport;
pub use layers::sinusoidal_positions;
pub use params::{Bound, Param, ParamId, ParamStore};

use encoder::Dock;
use layers::{Ctx, Stack, StackSpec};

use crate::error::{Error, Result};
use crate::masks::causal_mask;
use crate::numerics::{init, Real, Tape, Tensor, Var};
use crate::spans::SpanLayout;
use crate::textdata::{PackedSequence, TokenId, PAD};

pub const EMBEDDING: &str = "embed.tokens";

pub struct SemiCausalModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: ParamId,
    decoder: Stack,
    docks: BTreeMap<String, Dock>,
}

impl<T: Real> SemiCausalModel<T> {
    /// Builds and initialises a model; the same seed yields identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = &config.decoder;
        let std = config.init_std;
        let embed_std = (d.hidden as f64).powf(-0.5);
        let embed = params.add(
            EMBEDDING.into(),
            init::gaussian(&[config.vocab, d.hidden], embed_std, &mut rng),
            true,
        );
        let decoder = Stack::new(
            &mut params,
            &mut rng,
            StackSpec {
                prefix: "decoder",
                layers: d.layers,
                hidden: d.hidden,
                heads: d.heads,
                dropout: d.dropout,
                deepnorm: d.deepnorm,
                std,
            },
        );
        let mut docks = BTreeMap::new();
        for m in &config.modalities {
            let dock = Dock::new(&mut params, &mut rng, m, config.vocab, d.hidden, std);
            docks.insert(m.name.clone(), dock);
        }
        Ok(SemiCausalModel {
            config,
            params,
            embed,
            decoder,
            docks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The shared input-embedding / output-projection matrix.
    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.docks.keys().map(String::as_str)
    }

    /// First registered text modality; spans over plain sequences use it.
    pub fn text_modality(&self) -> Result<&str> {
        self.config
            .modalities
            .iter()
            .find(|m| m.input == InputKind::Text)
            .map(|m| m.name.as_str())
            .ok_or_else(|| Error::Registry("no text modality registered".into()))
    }

    /// Encoder inputs for a layout whose spans read the sequence's own tokens.
    pub fn text_docking(
        &self,
        ids: &[TokenId],
        layout: &SpanLayout,
    ) -> Result<Vec<EncoderInput<T>>> {
        let modality = self.text_modality()?;
        if ids.len() != layout.n() {
            return Err(Error::Dimension(format!(
                "layout n={} for {} tokens",
                layout.n(),
                ids.len()
            )));
        }
        Ok(layout
            .spans()
            .iter()
            .map(|s| EncoderInput::tokens(modality, ids[s.rows()].to_vec()))
            .collect())
    }

    /// Evaluation-mode session (no dropout, gradients on trainable leaves).
    pub fn session(&self) -> Session<'_, T> {
        Session::new(self, false, None)
    }

    /// Training-mode session: dropout draws from `seed`.
    pub fn training_session(&self, seed: u64) -> Session<'_, T> {
        Session::new(self, false, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Evaluation session tracking gradients on every leaf, frozen or not.
    pub fn gradient_session(&self) -> Session<'_, T> {
        Session::new(self, true, None)
    }

    /// Logits for a sequence whose spans are encoded from its own tokens.
    pub fn logits(&self, ids: &[TokenId], layout: &SpanLayout) -> Result<Tensor<T>> {
        let docked = self.text_docking(ids, layout)?;
        let mut s = self.session();
        let v = s.logits(ids, layout, &docked)?;
        Ok(s.tape().value(v).clone())
    }

    pub fn semicausal_loss(&self, seq: &PackedSequence, layout: &SpanLayout) -> Result<T> {
        let docked = self.text_docking(&seq.ids, layout)?;
        let mut s = self.session();
        let v = s.semicausal_loss(seq, layout, &docked)?;
        s.tape().value(v).item()
    }

    pub fn causal_lm_loss(&self, seq: &PackedSequence) -> Result<T> {
        let mut s = self.session();
        let v = s.causal_lm_loss(seq)?;
        s.tape().value(v).item()
    }

    fn dock(&self, modality: &str) -> Result<&Dock> {
        self.docks
            .get(modality)
            .ok_or_else(|| Error::Registry(format!("unknown modality `{modality}`")))
    }
}

/// One forward (and optionally backward) pass over a parameter snapshot.
pub struct Session<'m, T: Real> {
    model: &'m SemiCausalModel<T>,
    tape: Tape<T>,
    bound: Bound,
    rng: Option<ChaCha8Rng>,
}

impl<'m, T: Real> Session<'m, T> {
    fn new(model: &'m SemiCausalModel<T>, track_all: bool, rng: Option<ChaCha8Rng>) -> Self {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, track_all);
        Session {
            model,
            tape,
            bound,
            rng,
        }
    }

    fn ctx(&mut self) -> Ctx<'_, T> {
        Ctx {
            tape: &mut self.tape,
            bound: &self.bound,
            rng: self.rng.as_mut(),
            eps: T::of(self.model.config.ln_eps),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    pub fn param_var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Bidirectional encoding of one span, `len × d_enc`.
    pub fn encode_span(&mut self, input: &EncoderInput<T>) -> Result<Var> {
        let dock = self.model.dock(&input.modality)?;
        dock.encode(&mut self.ctx(), input)
    }

    /// Connector of `modality` applied to encoder rows, `len × d_dec`.
    pub fn connect(&mut self, modality: &str, reps: Var) -> Result<Var> {
        let dock = self.model.dock(modality)?;
        dock.connect(&mut self.ctx(), reps)
    }

    /// Decoder input rows for a sequence: token embeddings outside spans,
    /// connected encoder outputs inside them, plus sinusoidal positions.
    pub fn assemble_inputs(
        &mut self,
        ids: &[TokenId],
        layout: &SpanLayout,
        docked: &[EncoderInput<T>],
    ) -> Result<Var> {
        let n = ids.len();
        if layout.n() != n {
            return Err(Error::Dimension(format!(
                "layout n={} for {n} tokens",
                layout.n()
            )));
        }
        if docked.len() != layout.spans().len() {
            return Err(Error::Dimension(format!(
                "{} encoder inputs for {} spans",
                docked.len(),
                layout.spans().len()
            )));
        }
        let vocab = self.model.config.vocab;
        if let Some(bad) = ids.iter().find(|i| **i as usize >= vocab) {
            return Err(Error::Dimension(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let token_rows: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
        let embed = self.bound.var(self.model.embed);
        let x = self.tape.gather_rows(embed, &token_rows)?;
        let mut x = self
            .tape
            .scale(x, T::of((self.model.config.decoder.hidden as f64).sqrt()))?;
        if !layout.is_empty() {
            let mut parts = vec![x];
            let mut index: Vec<usize> = (0..n).collect();
            let mut offset = n;
            for (span, input) in layout.spans().iter().zip(docked) {
                if input.len() != span.len() {
                    return Err(Error::Dimension(format!(
                        "span {span} has {} positions but its input has {}",
                        span.len(),
                        input.len()
                    )));
                }
                let reps = self.encode_span(input)?;
                let rows = self.connect(&input.modality, reps)?;
                for (o, r) in span.rows().enumerate() {
                    index[r] = offset + o;
                }
                offset += span.len();
                parts.push(rows);
            }
            let all = self.tape.concat_rows(&parts)?;
            x = self.tape.gather_rows(all, &index)?;
        }
        let pos = self
            .tape
            .constant(sinusoidal_positions(n, self.model.config.decoder.hidden));
        self.tape.add(x, pos)
    }

    /// Causal decoder over assembled rows; returns `n × vocab` logits.
    pub fn decoder_forward(&mut self, inputs: Var) -> Result<Var> {
        let n = self.tape.value(inputs).rows();
        let max = self.model.config.decoder.max_len;
        if n == 0 || n > max {
            return Err(Error::Dimension(format!(
                "decoder input of {n} rows (max {max})"
            )));
        }
        let mask = causal_mask(n)?;
        let model = self.model;
        let mut ctx = self.ctx();
        let x = ctx.dropout(inputs, model.config.decoder.dropout)?;
        let h = model.decoder.forward(&mut ctx, x, mask.as_slice())?;
        let embed = self.bound.var(model.embed);
        self.tape.matmul_nt(h, embed)
    }

    pub fn logits(
        &mut self,
        ids: &[TokenId],
        layout: &SpanLayout,
        docked: &[EncoderInput<T>],
    ) -> Result<Var> {
        let x = self.assemble_inputs(ids, layout, docked)?;
        self.decoder_forward(x)
    }

    /// Mean negative log-likelihood over the layout's non-pad targets; target
    /// `t` is scored from decoder row `t - 2` (position `t - 1`).
    pub fn semicausal_loss(
        &mut self,
        seq: &PackedSequence,
        layout: &SpanLayout,
        docked: &[EncoderInput<T>],
    ) -> Result<Var> {
        layout.validate_for(seq)?;
        self.loss_at(&seq.ids, layout, docked, &layout.supervised_positions(seq))
    }

    /// Mean negative log-likelihood over an explicit set of 1-based target
    /// positions, each of which must be a valid target under `layout`.
    pub fn loss_at(
        &mut self,
        ids: &[TokenId],
        layout: &SpanLayout,
        docked: &[EncoderInput<T>],
        positions: &[usize],
    ) -> Result<Var> {
        let n = ids.len();
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for &t in positions {
            if t > n {
                return Err(Error::Dimension(format!(
                    "target position {t} beyond length {n}"
                )));
            }
            let row = layout.prediction_source(t)? - 1;
            targets[row] = ids[t - 1] as usize;
            mask[row] = true;
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::Contract("no target positions to score".into()));
        }
        let logits = self.logits(ids, layout, docked)?;
        self.tape.cross_entropy(logits, &targets, &mask)
    }

    /// Plain next-token loss: token embeddings only, every non-pad token after
    /// `<s>` scored.
    pub fn causal_lm_loss(&mut self, seq: &PackedSequence) -> Result<Var> {
        let n = seq.len();
        let targets: Vec<usize> = (0..n)
            .map(|r| {
                if r + 1 < n {
                    seq.ids[r + 1] as usize
                } else {
                    0
                }
            })
            .collect();
        let mask: Vec<bool> = (0..n).map(|r| r + 1 < n && seq.ids[r + 1] != PAD).collect();
        let x = self.assemble_inputs(&seq.ids, &SpanLayout::empty(n), &[])?;
        let logits = self.decoder_forward(x)?;
        self.tape.cross_entropy(logits, &targets, &mask)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient per parameter (by [`ParamId`] order); `None` for untracked
    /// leaves. Tracked leaves the loss never reached get zeros.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .vars()
            .iter()
            .map(|v| {
                if !self.tape.requires_grad(*v) {
                    return None;
                }
                Some(
                    self.tape
                        .grad(*v)
                        .unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape())),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
