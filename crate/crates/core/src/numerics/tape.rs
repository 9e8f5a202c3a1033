use super::kernels::{dot, matmul_nn, matmul_nt, matmul_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ColSlice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it and
/// a single reverse sweep visits each record exactly once. Leaf gradients
/// accumulate across [`Tape::backward`] calls until [`Tape::zero_grads`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!(
            "{what}: expected a matrix, got shape {s:?}"
        ))),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "variable {} is not on this tape",
                v.0
            )))
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[v.0].value.shape().to_vec(),
            g.clone(),
        ))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = shape2(self.value(a), "matmul lhs")?;
        let (k2, n) = shape2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = shape2(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = shape2(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(Error::dim(format!(
                "add_row: row of {} values for {cols} columns",
                self.value(row).numel()
            )));
        }
        let r = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| *x + *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).data().iter().map(|x| *x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|x| T::of(gelu_parts(x.as_f64()).0))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg))
    }

    /// Normalises each trailing-dimension row, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let d = self.value(x).cols();
        if d == 0 {
            return Err(Error::dim("layer_norm over an empty dimension"));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias must have {d} values"
            )));
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::one() / T::of(d as f64);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(g)
                    .zip(b)
                    .map(|((v, g), b)| (*v - mean) * rstd * *g + *b),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Row-wise softmax where `allow[i]` gates element `i` of `scores`.
    ///
    /// Disallowed entries get exactly zero probability. A row with no allowed
    /// entry is a contract violation.
    pub fn masked_softmax(&mut self, scores: Var, allow: &[bool]) -> Result<Var> {
        self.check(scores)?;
        let s = self.value(scores);
        if allow.len() != s.numel() {
            return Err(Error::dim(format!(
                "mask has {} entries for {} scores",
                allow.len(),
                s.numel()
            )));
        }
        let n = s.cols();
        let mut out = vec![T::zero(); s.numel()];
        for (r, (row, mrow)) in s.data().chunks(n).zip(allow.chunks(n)).enumerate() {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or_else(|| Error::contract(format!("softmax row {r} has no allowed key")))?;
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = T::zero();
            for ((o, v), m) in orow.iter_mut().zip(row).zip(mrow) {
                if *m {
                    *o = (*v - max).exp();
                    total += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let shape = s.shape().to_vec();
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax(scores),
            rg,
        ))
    }

    /// Embedding lookup: output row `r` is row `index[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        let (rows, cols) = shape2(t, "gather_rows table")?;
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::dim(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        for p in parts {
            self.check(*p)?;
        }
        let cols = shape2(self.value(first), "concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = shape2(self.value(*p), "concat_rows")?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows width {c} vs {cols}")));
            }
            out.extend_from_slice(self.value(*p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        for p in parts {
            self.check(*p)?;
        }
        let rows = shape2(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = shape2(self.value(*p), "concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols height {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn col_slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = shape2(self.value(x), "col_slice")?;
        if start + width > cols {
            return Err(Error::dim(format!(
                "columns {start}..{} out of {cols}",
                start + width
            )));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::ColSlice { x, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Mean negative log-likelihood of `targets[r]` under row `r` of `logits`,
    /// over the rows where `mask[r]` holds.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check(logits)?;
        let (rows, vocab) = shape2(self.value(logits), "cross_entropy logits")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let picked: Vec<(usize, usize)> = (0..rows)
            .filter(|&r| mask[r])
            .map(|r| (r, targets[r]))
            .collect();
        if picked.is_empty() {
            return Err(Error::contract(
                "cross_entropy with every position masked out",
            ));
        }
        if let Some((_, t)) = picked.iter().find(|(_, t)| *t >= vocab) {
            return Err(Error::dim(format!(
                "target id {t} outside vocabulary of {vocab}"
            )));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(picked.len() * vocab);
        let mut total = T::zero();
        for &(r, t) in &picked {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|v| (*v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (*v - lse).exp()));
        }
        let loss = total / T::of(picked.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: picked,
                probs,
            },
            rg,
        ))
    }

    /// Multiplies by a fixed keep-mask (already scaled by the inverse keep rate).
    pub fn dropout(&mut self, x: Var, keep: Vec<T>) -> Result<Var> {
        self.check(x)?;
        if keep.len() != self.value(x).numel() {
            return Err(Error::dim("dropout mask size mismatch"));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, k)| *v * *k)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, keep }, rg))
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed each time.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        if self.value(output).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(output).shape()
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![T::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nt(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn(m, k, n, val(*a).data(), g, gb);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nn(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn(m, n, k, g, val(*a).data(), gb);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
            }
            let cols = val(*row).numel();
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += *y);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), bv) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *x += *y * *bv;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, y), av) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += *y * *av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *c);
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, y), av) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += *y * T::of(gelu_parts(av.as_f64()).1);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let d = xv.cols();
            let gn = val(*gain).data();
            let inv_d = T::one() / T::of(d as f64);
            let xhat = |r: usize, j: usize| (xv.data()[r * d + j] - mean[r]) * rstd[r];
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..mean.len() {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat(r, j);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for chunk in g.chunks(d) {
                    gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += *y);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..mean.len() {
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = g[r * d + j] * gn[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat(r, j);
                    }
                    let (m1, m2) = (sum_dxh * inv_d, sum_dxh_xh * inv_d);
                    for j in 0..d {
                        let dxh = g[r * d + j] * gn[j];
                        gx[r * d + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::MaskedSoftmax(a) => {
            let y = &node.value;
            let n = y.cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, (yrow, grow)) in y.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let s = dot(yrow, grow);
                    for j in 0..n {
                        ga[r * n + j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::GatherRows { table, index } => {
            let cols = val(*table).cols();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut gt[i * cols..(i + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(x, y)| *x += *y);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(x, y)| *x += *y);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut start = 0;
            for p in parts {
                let w = val(*p).cols();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        let src = &g[r * total + start..r * total + start + w];
                        gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += *y);
                    }
                }
                start += w;
            }
        }
        Op::ColSlice { x, start } => {
            let cols = val(*x).cols();
            let w = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, src) in g.chunks(w.max(1)).enumerate() {
                    let dst = &mut gx[r * cols + start..r * cols + start + w];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            probs,
        } => {
            let vocab = val(*logits).cols();
            let scale = g[0] / T::of(rows.len() as f64);
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (i, &(r, t)) in rows.iter().enumerate() {
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    for (j, (d, pv)) in dst.iter_mut().zip(p).enumerate() {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        *d += scale * (*pv - onehot);
                    }
                }
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, b), k) in gx.iter_mut().zip(g).zip(keep) {
                    *a += *b * *k;
                }
            }
        }
    }
}
