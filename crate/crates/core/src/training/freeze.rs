use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::Real;

/// Which parameter leaves an optimizer step may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    /// Decoder, shared embedding and connectors train; each encoder trains
    /// only its top two blocks and final norm.
    Pretrain,
    /// Encoders and connectors train; the decoder and the shared embedding
    /// it owns stay fixed.
    SingleTask,
    Full,
}

impl FreezePolicy {
    pub fn trainable(self, config: &ModelConfig, name: &str) -> bool {
        match self {
            FreezePolicy::Full => true,
            FreezePolicy::SingleTask => {
                name.starts_with("encoder.") || name.starts_with("connector.")
            }
            FreezePolicy::Pretrain => {
                let Some(rest) = name.strip_prefix("encoder.") else {
                    return true;
                };
                config.modalities.iter().any(|m| {
                    let Some(local) = rest.strip_prefix(&m.name).and_then(|r| r.strip_prefix('.'))
                    else {
                        return false;
                    };
                    if local.starts_with("ln_f.") {
                        return true;
                    }
                    let Some(block) = local.strip_prefix("block.") else {
                        return false;
                    };
                    let layer: Option<usize> = block.split('.').next().and_then(|i| i.parse().ok());
                    layer.is_some_and(|i| i + 2 >= m.encoder.layers)
                })
            }
        }
    }

    /// Marks every leaf trainable or frozen; returns the trainable count.
    pub fn apply<T: Real>(self, config: &ModelConfig, params: &mut ParamStore<T>) -> Result<usize> {
        for p in params.iter_mut() {
            p.trainable = self.trainable(config, &p.name);
        }
        match params.trainable_count() {
            0 => Err(Error::Contract(format!(
                "{self:?} policy leaves no trainable parameter"
            ))),
            n => Ok(n),
        }
    }
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(FreezePolicy::Pretrain),
            "single-task" => Ok(FreezePolicy::SingleTask),
            "full" => Ok(FreezePolicy::Full),
            other => Err(Error::Parse(format!("unknown freeze policy `{other}`"))),
        }
    }
}
