//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCCK" | version u32 | config len u32 | config bytes
//! | tensor count u32 | tensors | moment count u32 | moment tensors | step u64
//! tensor := name len u32 | name | rank u32 | extents u32[rank] | f32 data
//! ```
//!
//! Moment tensors are named `adam.m/<param>` and `adam.v/<param>`. Values are
//! stored as `f32`, so `f32` models round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::optim::{AdamConfig, Moments, OptimizerState};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SCCK";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run configuration that produced the tensors.
    pub config: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub moments: Vec<(String, Tensor<f32>)>,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture<T: Real>(
        config: &str,
        params: &ParamStore<T>,
        state: Option<&OptimizerState<T>>,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .collect();
        let mut moments = Vec::new();
        if let Some(state) = state {
            for (p, m) in params.iter().zip(state.moments()) {
                if let Some(m) = m {
                    moments.push((format!("{M_PREFIX}{}", p.name), m.m.cast()));
                    moments.push((format!("{V_PREFIX}{}", p.name), m.v.cast()));
                }
            }
        }
        Checkpoint {
            config: config.to_owned(),
            params: tensors,
            moments,
            step: state.map_or(0, |s| s.step),
        }
    }

    /// Copies every stored tensor into `params`; names and shapes must match
    /// one to one.
    pub fn restore_params<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Registry(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in &self.params {
            params.assign(name, t.cast())?;
        }
        Ok(())
    }

    /// Rebuilds optimizer state for `params` (whose trainable flags decide
    /// which leaves need moments; missing ones start at zero).
    pub fn optimizer_state<T: Real>(
        &self,
        params: &ParamStore<T>,
        config: AdamConfig,
    ) -> Result<OptimizerState<T>> {
        let mut moments: Vec<Option<Moments<T>>> = vec![None; params.len()];
        for (name, t) in &self.moments {
            let (slot, first) = if let Some(p) = name.strip_prefix(M_PREFIX) {
                (p, true)
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                (p, false)
            } else {
                return Err(Error::Format(format!("unexpected moment tensor `{name}`")));
            };
            let id = params
                .id(slot)
                .ok_or_else(|| Error::Registry(format!("moment for unknown `{slot}`")))?;
            let shape = params.get(id).value.shape();
            if t.shape() != shape {
                return Err(Error::Dimension(format!(
                    "moment `{name}` has shape {:?}",
                    t.shape()
                )));
            }
            let entry = moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
            });
            if first {
                entry.m = t.cast();
            } else {
                entry.v = t.cast();
            }
        }
        let mut state = OptimizerState::from_parts(config, self.step, moments);
        state.sync(params);
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        for group in [&self.params, &self.moments] {
            out.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for (name, t) in group {
                put_str(&mut out, name);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for d in t.shape() {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config = r.string()?;
        let params = r.tensors()?;
        let moments = r.tensors()?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            moments,
            step,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    config: &str,
    params: &ParamStore<T>,
    state: Option<&OptimizerState<T>>,
) -> Result<()> {
    Checkpoint::capture(config, params, state).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Integrity(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Integrity(format!("invalid utf-8: {e}")))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Integrity(format!("tensor `{name}` extents overflow")))?;
            let data = self
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SemiCausalModel};

    fn sample() -> Checkpoint {
        let m = SemiCausalModel::<f32>::new(ModelConfig::micro(8), 4).unwrap();
        let mut state = OptimizerState::new(m.params(), AdamConfig::default());
        state.step = 17;
        Checkpoint::capture("cfg = 1", m.params(), Some(&state))
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_an_integrity_error() {
        let bytes = sample().to_bytes();
        for cut in (8..bytes.len()).step_by(997).chain([bytes.len() - 1]) {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..cut]),
                    Err(Error::Integrity(_))
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version {
                found: 9,
                expected: 1
            })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let m = SemiCausalModel::<f32>::new(ModelConfig::micro(8), 4).unwrap();
        let mut state = OptimizerState::new(m.params(), AdamConfig::default());
        state.step = 3;
        let c = Checkpoint::capture("", m.params(), Some(&state));
        assert_eq!(
            c.optimizer_state(m.params(), AdamConfig::default())
                .unwrap(),
            state
        );
    }
}
