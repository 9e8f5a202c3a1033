use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::freeze::FreezePolicy;
use super::optim::{adam_step, clip_grads, AdamConfig, OptimizerState};
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SemiCausalModel};
use crate::spans::{sample_spans, SamplerConfig, SpanLayout};
use crate::textdata::PackedSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Random spans are encoded bidirectionally; everything else is predicted.
    SemiCausal,
    /// Plain next-token prediction, no spans.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub objective: Objective,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            sampler: SamplerConfig {
                ratio: 0.25,
                min_len: 8,
                max_len: 16,
            },
            objective: Objective::SemiCausal,
            optimizer: AdamConfig::default(),
            schedule: Schedule {
                peak: 5e-4,
                warmup: 100,
                total: 5000,
            },
            batch_size: 8,
            grad_clip: 1.0,
        }
    }

    /// Stable textual form embedded in checkpoints.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One training sequence. Without a layout, spans are sampled per step (or
/// left empty under the causal objective); without explicit targets, every
/// supervised position is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub seq: PackedSequence,
    pub layout: Option<SpanLayout>,
    pub targets: Option<Vec<usize>>,
}

impl TrainItem {
    pub fn sequence(seq: PackedSequence) -> Self {
        TrainItem {
            seq,
            layout: None,
            targets: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for periodic and diagnostic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Emit a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    /// Log a progress line every this many steps (0: never).
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Mean fraction of non-pad tokens inside spans across the batch.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub policy: FreezePolicy,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn mean_coverage(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.coverage).sum::<f64>() / self.steps.len() as f64
    }
}

/// Owns a model, its optimizer state and the seeded data stream.
pub struct Trainer {
    config: TrainConfig,
    policy: FreezePolicy,
    seed: u64,
    model: SemiCausalModel<f32>,
    state: OptimizerState<f32>,
    rng: ChaCha8Rng,
    provenance: Option<String>,
}

/// Separates the data stream from parameter initialisation.
const DATA_STREAM: u64 = 0x5eed_da7a;

impl Trainer {
    pub fn new(config: TrainConfig, policy: FreezePolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = SemiCausalModel::new(config.model.clone(), seed)?;
        Trainer::with_model(config, model, policy, seed)
    }

    /// Continues from existing parameters (fresh optimizer state).
    pub fn with_model(
        config: TrainConfig,
        mut model: SemiCausalModel<f32>,
        policy: FreezePolicy,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Contract(
                "model does not match the training configuration".into(),
            ));
        }
        policy.apply(&config.model, model.params_mut())?;
        let state = OptimizerState::new(model.params(), config.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        Ok(Trainer {
            config,
            policy,
            seed,
            model,
            state,
            rng,
            provenance: None,
        })
    }

    /// Config text embedded in checkpoints instead of the training config.
    pub fn with_provenance(mut self, text: String) -> Self {
        self.provenance = Some(text);
        self
    }

    pub fn model(&self) -> &SemiCausalModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> SemiCausalModel<f32> {
        self.model
    }

    pub fn state(&self) -> &OptimizerState<f32> {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let text = self
            .provenance
            .clone()
            .unwrap_or_else(|| self.config.canonical());
        Checkpoint::capture(&text, self.model.params(), Some(&self.state))
    }

    /// One optimizer step on `batch`; the loss is the mean of per-sequence losses.
    pub fn step(&mut self, batch: &[TrainItem]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let step = self.state.step;
        let lr = self.config.schedule.lr_at(step);
        let mut prepared = Vec::with_capacity(batch.len());
        let mut coverage = 0.0;
        for item in batch {
            let layout = match (&item.layout, self.config.objective) {
                (Some(l), _) => l.clone(),
                (None, Objective::Causal) => SpanLayout::empty(item.seq.len()),
                (None, Objective::SemiCausal) => {
                    sample_spans(&item.seq, &self.config.sampler, &mut self.rng)?.0
                }
            };
            layout.validate_for(&item.seq)?;
            coverage += layout.covered() as f64 / item.seq.non_pad_len().max(1) as f64;
            let targets = item
                .targets
                .clone()
                .unwrap_or_else(|| layout.supervised_positions(&item.seq));
            prepared.push((layout, targets));
        }
        coverage /= batch.len() as f64;

        let dropout_seed = self.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (loss, mut grads) = {
            let mut s = self.model.training_session(dropout_seed);
            let mut total = None;
            for (item, (layout, targets)) in batch.iter().zip(&prepared) {
                let docked = self.model.text_docking(&item.seq.ids, layout)?;
                let l = s.loss_at(&item.seq.ids, layout, &docked, targets)?;
                total = Some(match total {
                    None => l,
                    Some(t) => s.tape_mut().add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = s.tape_mut().scale(total, 1.0 / batch.len() as f32)?;
            let loss = s.tape().value(mean).item()? as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
            }
            s.backward(mean)?;
            (loss, s.param_grads())
        };
        let grad_norm = clip_grads(self.model.params(), &mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {grad_norm} at step {step}"
            )));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.state, lr)?;
        Ok(StepRecord {
            step: step + 1,
            lr,
            loss,
            grad_norm,
            coverage,
        })
    }

    /// Runs `steps` optimizer steps over `items`, shuffled per epoch.
    pub fn run(
        &mut self,
        items: &[TrainItem],
        steps: u64,
        opts: &TrainOptions,
    ) -> Result<RunReport> {
        if items.is_empty() {
            return Err(Error::Contract("empty training corpus".into()));
        }
        let mut report = RunReport {
            seed: self.seed,
            policy: self.policy,
            steps: Vec::new(),
            checkpoints: Vec::new(),
        };
        let mut order: Vec<usize> = Vec::new();
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if order.is_empty() {
                    order = (0..items.len()).collect();
                    order.shuffle(&mut self.rng);
                    order.reverse();
                }
                batch.push(items[order.pop().expect("refilled")].clone());
            }
            let record = match self.step(&batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    let e = match self.save_to(opts, "diagnostic.scck") {
                        Ok(Some(path)) => Error::NonFinite(format!(
                            "{e}; diagnostic checkpoint {}",
                            path.display()
                        )),
                        _ => e,
                    };
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let n = record.step;
            if opts.log_every > 0 && n % opts.log_every == 0 {
                info!(
                    "step {n} lr {:.3e} loss {:.4} |g| {:.3} cov {:.3}",
                    record.lr, record.loss, record.grad_norm, record.coverage
                );
            }
            report.steps.push(record);
            if opts.checkpoint_every > 0 && n % opts.checkpoint_every == 0 && n < steps {
                if let Some(p) = self.save_to(opts, &format!("step-{n:06}.scck"))? {
                    report.checkpoints.push(p);
                }
            }
        }
        if let Some(p) = self.save_to(opts, "final.scck")? {
            report.checkpoints.push(p);
        }
        Ok(report)
    }

    fn save_to(&self, opts: &TrainOptions, file: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &opts.checkpoint_dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(file);
        self.checkpoint()
            .save(&path)
            .inspect_err(|e| warn!("checkpoint {} failed: {e}", path.display()))?;
        Ok(Some(path))
    }
}

/// Trains a fresh model on packed sequences for `config.schedule.total` steps.
pub fn train(
    config: &TrainConfig,
    corpus: &[PackedSequence],
    policy: FreezePolicy,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Trainer, RunReport)> {
    let mut trainer = Trainer::new(config.clone(), policy, seed)?;
    let items: Vec<TrainItem> = corpus.iter().cloned().map(TrainItem::sequence).collect();
    let report = trainer.run(&items, config.schedule.total, opts)?;
    Ok((trainer, report))
}
