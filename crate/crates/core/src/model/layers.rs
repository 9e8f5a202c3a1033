//! Transformer building blocks shared by the encoders and the decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{init, Real, Tape, Tensor, Var};

/// Everything a forward pass threads through the layers.
pub(crate) struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub bound: &'a Bound,
    /// Present in training mode; drives dropout.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub eps: T,
}

impl<T: Real> Ctx<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let keep = (0..self.tape.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        self.tape.dropout(x, keep)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init::gaussian(&[d_in, d_out], std, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), false);
        Affine { w, b }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        ctx.tape.add_row(y, ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::filled(&[d], T::one()),
            false,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false);
        Norm { gain, bias }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.tape.layer_norm(x, g, b, ctx.eps)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: Norm,
    up: Affine,
    down: Affine,
}

/// A stack of self-attention blocks plus a final norm.
///
/// Pre-norm by default: `x + f(LN(x))`. With `deepnorm_alpha` set, blocks are
/// post-norm with a scaled residual: `LN(alpha * x + f(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    blocks: Vec<Block>,
    final_norm: Norm,
    heads: usize,
    dropout: f64,
    deepnorm_alpha: Option<f64>,
}

pub(crate) struct StackSpec<'a> {
    pub prefix: &'a str,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub deepnorm: bool,
    pub std: f64,
}

impl Stack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        spec: StackSpec<'_>,
    ) -> Self {
        let d = spec.hidden;
        let (alpha, beta) = if spec.deepnorm {
            let n = spec.layers as f64;
            (Some((2.0 * n).powf(0.25)), (8.0 * n).powf(-0.25))
        } else {
            (None, 1.0)
        };
        let blocks = (0..spec.layers)
            .map(|i| {
                let p = format!("{}.block.{i}", spec.prefix);
                Block {
                    ln1: Norm::new(store, &format!("{p}.ln1"), d),
                    q: Affine::new(store, rng, &format!("{p}.attn.q"), d, d, spec.std),
                    k: Affine::new(store, rng, &format!("{p}.attn.k"), d, d, spec.std),
                    v: Affine::new(store, rng, &format!("{p}.attn.v"), d, d, spec.std * beta),
                    o: Affine::new(store, rng, &format!("{p}.attn.o"), d, d, spec.std * beta),
                    ln2: Norm::new(store, &format!("{p}.ln2"), d),
                    up: Affine::new(
                        store,
                        rng,
                        &format!("{p}.ffn.up"),
                        d,
                        4 * d,
                        spec.std * beta,
                    ),
                    down: Affine::new(
                        store,
                        rng,
                        &format!("{p}.ffn.down"),
                        4 * d,
                        d,
                        spec.std * beta,
                    ),
                }
            })
            .collect();
        let final_norm = Norm::new(store, &format!("{}.ln_f", spec.prefix), d);
        Stack {
            blocks,
            final_norm,
            heads: spec.heads,
            dropout: spec.dropout,
            deepnorm_alpha: alpha,
        }
    }

    fn attention<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        b: &Block,
        x: Var,
        allow: &[bool],
    ) -> Result<Var> {
        let q = b.q.forward(ctx, x)?;
        let k = b.k.forward(ctx, x)?;
        let v = b.v.forward(ctx, x)?;
        let d = ctx.tape.value(x).cols();
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.col_slice(q, h * dh, dh)?;
            let kh = ctx.tape.col_slice(k, h * dh, dh)?;
            let vh = ctx.tape.col_slice(v, h * dh, dh)?;
            let s = ctx.tape.matmul_nt(qh, kh)?;
            let s = ctx.tape.scale(s, scale)?;
            let p = ctx.tape.masked_softmax(s, allow)?;
            outs.push(ctx.tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.tape.concat_cols(&outs)?
        };
        b.o.forward(ctx, cat)
    }

    fn ffn<T: Real>(&self, ctx: &mut Ctx<'_, T>, b: &Block, x: Var) -> Result<Var> {
        let h = b.up.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        b.down.forward(ctx, h)
    }

    /// Runs every block under the given `n × n` visibility flags.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        mut x: Var,
        allow: &[bool],
    ) -> Result<Var> {
        for b in &self.blocks {
            match self.deepnorm_alpha {
                None => {
                    let h = b.ln1.forward(ctx, x)?;
                    let a = self.attention(ctx, b, h, allow)?;
                    let a = ctx.dropout(a, self.dropout)?;
                    x = ctx.tape.add(x, a)?;
                    let h = b.ln2.forward(ctx, x)?;
                    let f = self.ffn(ctx, b, h)?;
                    let f = ctx.dropout(f, self.dropout)?;
                    x = ctx.tape.add(x, f)?;
                }
                Some(alpha) => {
                    let alpha = T::of(alpha);
                    let a = self.attention(ctx, b, x, allow)?;
                    let a = ctx.dropout(a, self.dropout)?;
                    let r = ctx.tape.scale(x, alpha)?;
                    let s = ctx.tape.add(r, a)?;
                    x = b.ln1.forward(ctx, s)?;
                    let f = self.ffn(ctx, b, x)?;
                    let f = ctx.dropout(f, self.dropout)?;
                    let r = ctx.tape.scale(x, alpha)?;
                    let s = ctx.tape.add(r, f)?;
                    x = b.ln2.forward(ctx, s)?;
                }
            }
        }
        self.final_norm.forward(ctx, x)
    }
}

/// Fixed sinusoidal position table, `rows × d`.
pub fn sinusoidal_positions<T: Real>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![rows, d], data).expect("consistent shape")
}
