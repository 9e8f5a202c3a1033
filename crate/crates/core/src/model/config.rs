use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textdata::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Post-norm residuals scaled DeepNet-style instead of pre-norm blocks.
    #[serde(default)]
    pub deepnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_span: usize,
    pub dropout: f64,
    #[serde(default)]
    pub deepnorm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorKind {
    /// One affine map.
    Linear,
    /// Three affine maps with GELU between them.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    /// Byte tokens with the encoder's own embedding table.
    Text,
    /// Real-valued rows of the given width, lifted by an affine map.
    Vector { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub input: InputKind,
    pub encoder: EncoderConfig,
    pub connector: ConnectorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    pub decoder: DecoderConfig,
    pub modalities: Vec<ModalityConfig>,
}

impl ModelConfig {
    /// The desk-scale defaults: n=256, span cap 64, widths 128/64, four layers each.
    pub fn desk() -> Self {
        ModelConfig {
            vocab: VOCAB_SIZE,
            init_std: 0.02,
            ln_eps: 1e-5,
            decoder: DecoderConfig {
                layers: 4,
                hidden: 128,
                heads: 4,
                max_len: 256,
                dropout: 0.0,
                deepnorm: false,
            },
            modalities: vec![ModalityConfig {
                name: "text".into(),
                input: InputKind::Text,
                encoder: EncoderConfig {
                    layers: 4,
                    hidden: 64,
                    heads: 4,
                    max_span: 64,
                    dropout: 0.1,
                    deepnorm: false,
                },
                connector: ConnectorKind::Linear,
            }],
        }
    }

    /// A tiny two-layer/two-layer configuration for tests.
    pub fn micro(max_len: usize) -> Self {
        ModelConfig {
            vocab: VOCAB_SIZE,
            init_std: 0.02,
            ln_eps: 1e-5,
            decoder: DecoderConfig {
                layers: 2,
                hidden: 16,
                heads: 2,
                max_len,
                dropout: 0.0,
                deepnorm: false,
            },
            modalities: vec![ModalityConfig {
                name: "text".into(),
                input: InputKind::Text,
                encoder: EncoderConfig {
                    layers: 2,
                    hidden: 12,
                    heads: 2,
                    max_span: max_len,
                    dropout: 0.0,
                    deepnorm: false,
                },
                connector: ConnectorKind::Linear,
            }],
        }
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityConfig> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        if d.hidden == 0 || d.heads == 0 || !d.hidden.is_multiple_of(d.heads) {
            return Err(Error::Dimension(format!(
                "decoder width {} not divisible by {} heads",
                d.hidden, d.heads
            )));
        }
        if d.max_len == 0 || self.vocab == 0 {
            return Err(Error::Dimension(
                "decoder needs a positive length and vocabulary".into(),
            ));
        }
        if !(0.0..1.0).contains(&d.dropout) {
            return Err(Error::Contract(format!(
                "decoder dropout {} outside [0, 1)",
                d.dropout
            )));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            let e = &m.encoder;
            if e.hidden == 0 || e.heads == 0 || !e.hidden.is_multiple_of(e.heads) {
                return Err(Error::Dimension(format!(
                    "encoder `{}` width {} not divisible by {} heads",
                    m.name, e.hidden, e.heads
                )));
            }
            if e.max_span == 0 {
                return Err(Error::Dimension(format!(
                    "encoder `{}` has a zero span cap",
                    m.name
                )));
            }
            if !(0.0..1.0).contains(&e.dropout) {
                return Err(Error::Contract(format!(
                    "encoder `{}` dropout {} outside [0, 1)",
                    m.name, e.dropout
                )));
            }
            if let InputKind::Vector { width: 0 } = m.input {
                return Err(Error::Dimension(format!(
                    "encoder `{}` has zero feature width",
                    m.name
                )));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Registry(format!(
                    "modality `{}` registered twice",
                    m.name
                )));
            }
        }
        Ok(())
    }
}
