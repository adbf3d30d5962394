//! Reverse-mode differentiation over a linear tape of recorded operations.

use super::ops::{self, NormStats};
use super::tensor::{Scalar, Tensor};
use crate::error::{ArmdError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

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
        stats: NormStats<T>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        dropout: Option<Vec<T>>,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    ShiftRows {
        x: Var,
        start: Var,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations so that gradients can be computed with [`Tape::backward`].
///
/// Values are immutable once recorded. A tape is single-use: build, call `backward`
/// once per loss, drop.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads[var.0].take()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ArmdError::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, &y)| *o += y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `[r,c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, &y)| *o *= y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize) -> Result<Var> {
        let out = ops::rope_rotate(self.value(x), positions, head_dim)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V,d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(ArmdError::Index(format!(
                    "token id {id} outside vocabulary of {rows}"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head masked attention; see [`ops::attention`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        allowed: &[bool],
        heads: usize,
        dropout: Option<Vec<T>>,
    ) -> Result<Var> {
        let (out, cache) = ops::attention(
            self.value(q),
            self.value(k),
            self.value(v),
            allowed,
            heads,
            dropout.as_deref(),
        )?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs: cache.probs,
                dropout,
            },
            rg,
        ))
    }

    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let out = ops::masked_softmax(self.value(x), allowed)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// `sum_n weights[n] * -log softmax(logits[n])[targets[n]]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n || weights.len() != n {
            return Err(ArmdError::Validation(format!(
                "cross_entropy: {n} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = Vec::with_capacity(n * vocab);
        let mut loss = T::zero();
        for ((row, &t), &w) in self
            .value(logits)
            .data()
            .chunks(vocab)
            .zip(targets)
            .zip(weights)
        {
            if t >= vocab {
                return Err(ArmdError::Index(format!(
                    "target {t} outside vocabulary of {vocab}"
                )));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + total.ln();
            loss += w * (lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row `i` of the result is row `i-1` of `x`; row 0 is `start`.
    pub fn shift_rows(&mut self, x: Var, start: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(start).numel() != d {
            return Err(ArmdError::Dimension(format!(
                "start row must have width {d}"
            )));
        }
        let mut out = Vec::with_capacity(n * d);
        if n > 0 {
            out.extend_from_slice(self.value(start).data());
            out.extend_from_slice(&self.value(x).data()[..(n - 1) * d]);
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(x) || self.rg(start);
        Ok(self.push(out, Op::ShiftRows { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(ArmdError::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    ops::mm_nt_acc(g, self.value(*b).data(), &mut da, m, n, k);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    ops::mm_tn_acc(self.value(*a).data(), g, &mut db, m, k, n);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T, a[m,k], b[n,k]
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    ops::mm_acc(g, self.value(*b).data(), &mut da, m, n, k);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    ops::mm_tn_acc(g, self.value(*a).data(), &mut db, m, n, k);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if self.rg(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| gi * ops::gelu_grad(xi))
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = self.value(*x);
                let (n, d) = xv.dims2()?;
                let gamma = self.value(*gain).data();
                let mut dx = vec![T::zero(); n * d];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let inv_d = T::of(1.0 / d as f64);
                for r in 0..n {
                    let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        let dy = gr[j] * gamma[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        let dy = gr[j] * gamma[j];
                        dx[r * d + j] = rs * (dy - inv_d * sum_dy - xhat * inv_d * sum_dy_xhat);
                    }
                }
                if self.rg(*x) {
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*gain) {
                    add_into(&mut grads[gain.0], dgain);
                }
                if self.rg(*bias) {
                    add_into(&mut grads[bias.0], dbias);
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let gt = Tensor::new(shape, g.to_vec())?;
                let dx = ops::rope_apply(&gt, positions, *head_dim, true)?;
                add_into(&mut grads[x.0], dx.into_data());
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = self.value(*table).dims2()?;
                let mut dt = vec![T::zero(); rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                add_into(&mut grads[table.0], dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                dropout,
            } => {
                let (dq, dk, dv) = ops::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    dropout.as_deref(),
                    *heads,
                    g,
                );
                if self.rg(*q) {
                    add_into(&mut grads[q.0], dq);
                }
                if self.rg(*k) {
                    add_into(&mut grads[k.0], dk);
                }
                if self.rg(*v) {
                    add_into(&mut grads[v.0], dv);
                }
            }
            Op::MaskedSoftmax(x) => {
                let p = node.value.data();
                let (_, c) = node.value.dims2()?;
                let mut dx = vec![T::zero(); p.len()];
                for ((dx_row, p_row), g_row) in dx.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = p_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                    for ((d, &pj), &gj) in dx_row.iter_mut().zip(p_row).zip(g_row) {
                        *d = pj * (gj - dot);
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.value(*logits).shape()[1];
                let upstream = g[0];
                let mut dl = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    row[t] -= T::one();
                    let s = w * upstream;
                    row.iter_mut().for_each(|x| *x *= s);
                }
                add_into(&mut grads[logits.0], dl);
            }
            Op::ShiftRows { x, start } => {
                let (n, d) = self.value(*x).dims2()?;
                if self.rg(*start) && n > 0 {
                    add_into(&mut grads[start.0], g[..d].to_vec());
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    if n > 1 {
                        dx[..(n - 1) * d].copy_from_slice(&g[d..]);
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
        }
        Ok(())
    }
}
