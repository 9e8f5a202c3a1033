//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Per-leaf moment accumulators (indexed like the parameter store) and the
/// shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> OptimizerState<T> {
    /// Zeroed moments for every currently trainable leaf.
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                p.trainable.then(|| Moments {
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                })
            })
            .collect();
        OptimizerState {
            config,
            step: 0,
            moments,
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, moments: Vec<Option<Moments<T>>>) -> Self {
        OptimizerState {
            config,
            step,
            moments,
        }
    }

    pub fn moments(&self) -> &[Option<Moments<T>>] {
        &self.moments
    }

    /// Drops moments of leaves that are no longer trainable and creates
    /// zeroed ones for newly trainable leaves.
    pub fn sync(&mut self, params: &ParamStore<T>) {
        self.moments.resize(params.len(), None);
        for (slot, p) in self.moments.iter_mut().zip(params.iter()) {
            match (p.trainable, slot.is_some()) {
                (false, true) => *slot = None,
                (true, false) => {
                    *slot = Some(Moments {
                        m: Tensor::zeros(p.value.shape()),
                        v: Tensor::zeros(p.value.shape()),
                    })
                }
                _ => {}
            }
        }
    }
}

/// Global L2 norm over the gradients of trainable leaves.
pub fn grad_norm<T: Real>(params: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
    params
        .iter()
        .zip(grads)
        .filter(|(p, _)| p.trainable)
        .filter_map(|(_, g)| g.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grads<T: Real>(
    params: &ParamStore<T>,
    grads: &mut [Option<Tensor<T>>],
    max_norm: f64,
) -> f64 {
    let norm = grad_norm(params, grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update of every trainable leaf. Decay applies to
/// leaves flagged `decay` and is decoupled from the moment estimates.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            None if p.trainable => {
                return Err(Error::Contract(format!(
                    "no gradient for trainable `{}`",
                    p.name
                )))
            }
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} for `{}`",
                    g.shape(),
                    p.name
                )))
            }
            _ => {}
        }
    }
    state.sync(params);
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step_size = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    let shrink = T::of(1.0 - lr * c.weight_decay);
    for ((p, g), slot) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let (Some(g), Some(mom)) = (g, slot.as_mut()) else {
            unreachable!("checked above")
        };
        if p.decay && c.weight_decay != 0.0 {
            p.value.data_mut().iter_mut().for_each(|w| *w *= shrink);
        }
        let w = p.value.data_mut();
        let m = mom.m.data_mut();
        let v = mom.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            w[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
