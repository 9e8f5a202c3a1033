//! Run configuration: a TOML file whose canonical serialization is hashed
//! into every report and embedded in every checkpoint.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use semicausal::eval::{BeamConfig, Decoding};
use semicausal::model::ModelConfig;
use semicausal::spans::SamplerConfig;
use semicausal::training::{AdamConfig, FreezePolicy, Objective, Schedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "SCLM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Objective,
    pub policy: FreezePolicy,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Periodic checkpoints every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub policy: FreezePolicy,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Instruction text placed in front of every input inside its span.
    pub prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecodeKind {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    /// Zero-shot instruction (used when `k = 0`).
    pub prompt: String,
    pub decode: DecodeKind,
    pub beam_size: usize,
    pub alpha: f64,
    /// Generation budget; defaults to the longest gold answer plus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new: Option<usize>,
}

impl EvalSection {
    pub fn decoding(&self) -> Decoding {
        match self.decode {
            DecodeKind::Greedy => Decoding::Greedy,
            DecodeKind::Beam => Decoding::Beam(BeamConfig {
                size: self.beam_size,
                alpha: self.alpha,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub sampler: SamplerConfig,
    pub optimizer: AdamConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TrainConfig::desk();
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            train: TrainSection {
                objective: Objective::SemiCausal,
                policy: FreezePolicy::Pretrain,
                steps: desk.schedule.total,
                warmup: desk.schedule.warmup,
                peak_lr: desk.schedule.peak,
                batch_size: desk.batch_size,
                grad_clip: desk.grad_clip,
                checkpoint_every: 1000,
                log_every: 100,
            },
            finetune: FinetuneSection {
                policy: FreezePolicy::SingleTask,
                steps: 500,
                warmup: 50,
                peak_lr: 5e-4,
                batch_size: 8,
                prompt: String::new(),
            },
            eval: EvalSection {
                k: 0,
                prompt: String::new(),
                decode: DecodeKind::Greedy,
                beam_size: 4,
                alpha: 0.6,
                max_new: None,
            },
            sampler: desk.sampler,
            optimizer: desk.optimizer,
            model: desk.model,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::parse(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.task,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Stable serialization: the same config always yields the same bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies the seed override: `--seed` first, then `SCLM_SEED`.
    pub fn override_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(seed) = flag {
            self.seed = seed;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| semicausal::Error::Parse(format!("{SEED_ENV}={v:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model.clone(),
            sampler: self.sampler,
            objective: t.objective,
            optimizer: self.optimizer,
            schedule: Schedule {
                peak: t.peak_lr,
                warmup: t.warmup,
                total: t.steps,
            },
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let f = &self.finetune;
        TrainConfig {
            schedule: Schedule {
                peak: f.peak_lr,
                warmup: f.warmup,
                total: f.steps,
            },
            batch_size: f.batch_size,
            ..self.pretrain_config()
        }
    }
}
