//! Bidirectional span encoders and their connectors.

use rand_chacha::ChaCha8Rng;

use super::config::{ConnectorKind, InputKind, ModalityConfig};
use super::layers::{Affine, Ctx, Stack, StackSpec};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::masks::noncausal_mask;
use crate::numerics::{init, Real, Tensor, Var};
use crate::textdata::TokenId;

/// What one span feeds its encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload<T> {
    Tokens(Vec<TokenId>),
    /// `len × width` real-valued rows.
    Features(Tensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput<T> {
    pub modality: String,
    pub payload: Payload<T>,
}

impl<T: Real> EncoderInput<T> {
    pub fn tokens(modality: impl Into<String>, ids: Vec<TokenId>) -> Self {
        EncoderInput {
            modality: modality.into(),
            payload: Payload::Tokens(ids),
        }
    }

    pub fn features(modality: impl Into<String>, rows: Tensor<T>) -> Self {
        EncoderInput {
            modality: modality.into(),
            payload: Payload::Features(rows),
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Tokens(ids) => ids.len(),
            Payload::Features(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
enum InputLayer {
    Tokens(ParamId),
    Lift(Affine),
}

#[derive(Clone, Debug)]
pub(crate) struct SpanEncoder {
    input: InputLayer,
    positions: ParamId,
    stack: Stack,
    max_span: usize,
    dropout: f64,
}

#[derive(Clone, Debug)]
pub(crate) enum Connector {
    Linear(Affine),
    Mlp([Affine; 3]),
}

/// A registered modality: its encoder and the connector into the decoder.
#[derive(Clone, Debug)]
pub(crate) struct Dock {
    pub config: ModalityConfig,
    pub encoder: SpanEncoder,
    pub connector: Connector,
}

impl Dock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModalityConfig,
        vocab: usize,
        d_dec: usize,
        std: f64,
    ) -> Self {
        let e = &cfg.encoder;
        let prefix = format!("encoder.{}", cfg.name);
        let input = match cfg.input {
            InputKind::Text => InputLayer::Tokens(store.add(
                format!("{prefix}.tokens"),
                init::gaussian(&[vocab, e.hidden], std, rng),
                true,
            )),
            InputKind::Vector { width } => InputLayer::Lift(Affine::new(
                store,
                rng,
                &format!("{prefix}.lift"),
                width,
                e.hidden,
                std,
            )),
        };
        let positions = store.add(
            format!("{prefix}.positions"),
            init::gaussian(&[e.max_span, e.hidden], std, rng),
            true,
        );
        let stack = Stack::new(
            store,
            rng,
            StackSpec {
                prefix: &prefix,
                layers: e.layers,
                hidden: e.hidden,
                heads: e.heads,
                dropout: e.dropout,
                deepnorm: e.deepnorm,
                std,
            },
        );
        let cprefix = format!("connector.{}", cfg.name);
        let connector = match cfg.connector {
            ConnectorKind::Linear => {
                Connector::Linear(Affine::new(store, rng, &cprefix, e.hidden, d_dec, std))
            }
            ConnectorKind::Mlp => Connector::Mlp([
                Affine::new(store, rng, &format!("{cprefix}.0"), e.hidden, d_dec, std),
                Affine::new(store, rng, &format!("{cprefix}.1"), d_dec, d_dec, std),
                Affine::new(store, rng, &format!("{cprefix}.2"), d_dec, d_dec, std),
            ]),
        };
        Dock {
            config: cfg.clone(),
            encoder: SpanEncoder {
                input,
                positions,
                stack,
                max_span: e.max_span,
                dropout: e.dropout,
            },
            connector,
        }
    }

    /// Full bidirectional encoding of one span: `len × d_enc`.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &EncoderInput<T>) -> Result<Var> {
        let enc = &self.encoder;
        let len = input.len();
        if len == 0 {
            return Err(Error::Dimension("empty span".into()));
        }
        if len > enc.max_span {
            return Err(Error::Dimension(format!(
                "span of {len} exceeds `{}` encoder cap {}",
                self.config.name, enc.max_span
            )));
        }
        let x = match (&enc.input, &input.payload) {
            (InputLayer::Tokens(table), Payload::Tokens(ids)) => {
                let idx: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
                ctx.tape.gather_rows(ctx.p(*table), &idx)?
            }
            (InputLayer::Lift(lift), Payload::Features(rows)) => {
                let feats = ctx.tape.constant(rows.clone());
                lift.forward(ctx, feats)?
            }
            _ => {
                return Err(Error::Registry(format!(
                    "payload kind does not match modality `{}`",
                    self.config.name
                )))
            }
        };
        let idx: Vec<usize> = (0..len).collect();
        let pos = ctx.tape.gather_rows(ctx.p(enc.positions), &idx)?;
        let x = ctx.tape.add(x, pos)?;
        let x = ctx.dropout(x, enc.dropout)?;
        let mask = noncausal_mask(len)?;
        enc.stack.forward(ctx, x, mask.as_slice())
    }

    /// Projects encoder rows to the decoder width.
    pub fn connect<T: Real>(&self, ctx: &mut Ctx<'_, T>, reps: Var) -> Result<Var> {
        let want = self.config.encoder.hidden;
        let got = ctx.tape.value(reps).cols();
        if got != want {
            return Err(Error::Dimension(format!(
                "connector expects width {want}, got {got}"
            )));
        }
        match &self.connector {
            Connector::Linear(a) => a.forward(ctx, reps),
            Connector::Mlp([a, b, c]) => {
                let h = a.forward(ctx, reps)?;
                let h = ctx.tape.gelu(h)?;
                let h = b.forward(ctx, h)?;
                let h = ctx.tape.gelu(h)?;
                c.forward(ctx, h)
            }
        }
    }
}
