// Copyright 2026 The EKD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use rand::Rng;

use super::attention::{self, AttentionSpec};
use super::gemm::gemm;
use super::{Scalar, Tensor};
use crate::error::{EkdError, Result};

/// Handle to one recorded value in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Box<AttentionSpec>,
        dim: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
    grad: Option<Tensor<F>>,
}

/// Append-only gradient tape.
///
/// Every operation computes its value eagerly and, when gradients are
/// enabled and some input requires them, records a backward rule. Inputs are
/// always recorded before the node that consumes them, so one reverse sweep
/// over the node list visits each node once in a valid order.
///
/// [`Graph::backward`] accumulates into leaf gradients: calling it twice
/// without [`Graph::zero_grad`] sums both passes.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sum a full-size gradient down to an operand of `n` elements that was
/// broadcast over trailing dimensions.
fn reduce_to<F: Scalar>(g: Vec<F>, n: usize) -> Vec<F> {
    if g.len() == n {
        return g;
    }
    let mut out = vec![F::zero(); n];
    for chunk in g.chunks(n) {
        add_into(&mut out, chunk);
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward rules (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no connection to the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for tensors that do not
    /// require gradients or before any backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(EkdError::Numeric(format!("non-finite input to {what}")))
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(EkdError::Shape(format!(
                "{what} expects a 2-D tensor, got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(EkdError::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new([cols, rows], out)?;
        Ok(self.push(value, &[a], Op::Transpose { a, rows, cols }))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| {
            EkdError::Shape(format!("{what}: cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let out = (0..n)
            .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
            .collect();
        Tensor::new(shape, out)
    }

    /// Elementwise sum; the smaller operand must match the trailing
    /// dimensions of the larger one (a scalar always does).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i] * c);
        self.push(value, &[a], Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(F::from_f64_lossy(c)));
        self.add(a, s)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let src = self.value(a);
        Tensor::from_fn(src.shape().to_vec(), |i| f(src.data()[i]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| x.exp());
        self.push(value, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| x.ln());
        self.push(value, &[a], Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| if x > F::zero() { x } else { F::zero() });
        self.push(value, &[a], Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| F::from_f64_lossy(gelu_parts(x.to_f64_lossy()).0));
        self.push(value, &[a], Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = F::from_usize(t.numel().max(1)).unwrap();
        let s = t.data().iter().fold(F::zero(), |acc, &x| acc + x) / n;
        self.push(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax_rows")?;
        let src = self.value(a);
        let c = src.cols();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, &[a], Op::Softmax(a)))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax_rows")?;
        let src = self.value(a);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(src.cols()) {
            log_softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, &[a], Op::LogSoftmax(a)))
    }

    /// Normalise each row to zero mean and unit variance, then apply
    /// `gain * x + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if c == 0 || self.shape(x).is_empty() {
            return Err(EkdError::Shape(
                "layer_norm needs at least one column".into(),
            ));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(EkdError::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(p) != [c] {
                return Err(EkdError::Shape(format!(
                    "layer_norm {what} shape {:?}, expected [{c}]",
                    self.shape(p)
                )));
            }
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let nf = F::from_usize(c).unwrap();
        let epsf = F::from_f64_lossy(eps);
        let rows = src.rows();
        let mut out = vec![F::zero(); rows * c];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, row) in src.data().chunks(c).enumerate() {
            let mean = row.iter().fold(F::zero(), |acc, &v| acc + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / nf;
            let rstd = F::one() / (var + epsf).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Gather rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(EkdError::Vocab(format!(
                    "id {id} outside table of {v} rows"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(EkdError::Contract(format!(
                "dropout probability {p} outside [0,1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i] * mask[i]);
        Ok(self.push(value, &[x], Op::Dropout { x, mask }))
    }

    /// Multi-head scaled dot-product attention; see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let dim = spec.validate(self.shape(q), self.shape(k), self.shape(v))?;
        let (out, probs) = attention::forward(
            spec,
            dim,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new([spec.batch * spec.q_len, dim], out)?;
        Ok(self.push(
            value,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec.clone()),
                dim,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node
    /// (`[batch, heads, q_len, k_len]`), if the node kept them.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Leaves that require gradients but are not reachable from `loss` get a
    /// zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(EkdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (input, contribution) in self.local_backward(id, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, g: Vec<F>) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let mut res = Vec::new();
                if wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(*m, *n, *k, &g, false, val(*b), true, &mut da, false);
                    res.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(*k, *m, *n, val(*a), true, &g, false, &mut db, false);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose { a, rows, cols } => {
                let mut da = vec![F::zero(); rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        da[i * cols + j] = g[j * rows + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add { a, b } => {
                let (na, nb) = (val(*a).len(), val(*b).len());
                vec![(*a, reduce_to(g.clone(), na)), (*b, reduce_to(g, nb))]
            }
            Op::Sub { a, b } => {
                let (na, nb) = (val(*a).len(), val(*b).len());
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                vec![(*a, reduce_to(g, na)), (*b, reduce_to(neg, nb))]
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = Vec::new();
                if wants(*a) {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * vb[i % vb.len()])
                        .collect();
                    res.push((*a, reduce_to(full, va.len())));
                }
                if wants(*b) {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * va[i % va.len()])
                        .collect();
                    res.push((*b, reduce_to(full, vb.len())));
                }
                res
            }
            Op::Scale { a, c } => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(&x, &y)| x * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(&x, &y)| x / y).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&x, &y)| if y > F::zero() { x } else { F::zero() })
                    .collect(),
            )],
            Op::Gelu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&x, &y)| x * F::from_f64_lossy(gelu_parts(y.to_f64_lossy()).1))
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / F::from_usize(n.max(1)).unwrap(); n])]
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut da = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let dot = gr
                        .iter()
                        .zip(yr)
                        .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut da = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let total = gr.iter().fold(F::zero(), |acc, &x| acc + x);
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gv = val(*gain);
                let c = gv.len();
                let nf = F::from_usize(c).unwrap();
                let mut dx = vec![F::zero(); xv.len()];
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                let mut xhat = vec![F::zero(); c];
                let mut dxhat = vec![F::zero(); c];
                for r in 0..xv.len() / c {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                let mut dt = vec![F::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                vec![(*table, dt)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())]
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                dim,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention::backward(spec, *dim, val(*q), val(*k), val(*v), probs, &g);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        }
    }
}

/// Numerically stable log-softmax of one row, in place.
pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let total = row.iter().fold(F::zero(), |acc, &x| acc + (x - max).exp());
    let lse = max + total.ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, naive_matmul};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_worked_example() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(
            g.value(c).data(),
            naive_matmul(2, 2, 2, &[1., 2., 3., 4.], &[5., 6., 7., 8.])
        );
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, EkdError::Shape(_)));
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[0.0; 4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);

        let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0.0, f64::NAN]));
        assert!(matches!(g.softmax_rows(x), Err(EkdError::Numeric(_))));
    }

    #[test]
    fn reductions_and_broadcast() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        assert_eq!(g.value(s).item().unwrap(), 6.0);

        let v = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean(v);
        let col = g.constant(t(&[2, 1], &[0.0, 10.0]));
        let r = g.add(col, m).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(g.value(r).data(), &[3.0, 13.0]);

        let bad = g.constant(Tensor::zeros([3]));
        let wide = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.add(wide, bad), Err(EkdError::Shape(_))));
    }

    #[test]
    fn log_exp_inverse() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let x = g.constant(t(&[xs.len()], &xs));
        let e = g.exp(x);
        let l = g.log(e);
        for (a, b) in g.value(l).data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::full([3], 1.0));
        let bias = g.constant(Tensor::zeros([3]));
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm_rows(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full([2], 1.0));
        let bias = g.constant(Tensor::zeros([2]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm_rows(x, gain, bias, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        // constant gain: the output row mean equals the bias mean
        let gain = g.constant(Tensor::full([4], 2.0));
        let bias = g.constant(t(&[4], &[0.5, -1.0, 2.0, 0.3]));
        let x = g.constant(t(&[1, 4], &[0.3, -2.0, 7.5, 1.0]));
        let y = g.layer_norm_rows(x, gain, bias, 1e-5).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.45).abs() < 1e-12);
    }

    #[test]
    fn backward_polynomial_and_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        // repeated backward accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        // f(x) = sum(softmax([x, 0])) is constant
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.7));
        let mask = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let r = g.mul(mask, x).unwrap();
        let s = g.softmax_rows(r).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert!(g.grad(x).unwrap().data()[0].abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_leaves_constants_alone() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([2]));
        let c = g.constant(Tensor::full([2], 1.0));
        let y = g.add(x, c).unwrap();
        assert!(matches!(g.backward(y), Err(EkdError::Contract(_))));
        let s = g.sum(y);
        let unused = g.param(Tensor::zeros([3]));
        let detached = g.detach(x);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(detached).is_none());
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn composite_least_squares_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[4, 1]);
        let x0 = random(&mut rng, &[3, 1]);
        let err = grad_check(
            |g, vars| {
                let a = g.constant(a.clone());
                let b = g.constant(b.clone());
                let ax = g.matmul(a, vars[0])?;
                let d = g.sub(ax, b)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean(sq))
            },
            &[x0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn check_op(build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) {
        let err = grad_check(build, inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x23 = random(&mut rng, &[2, 3]);
        let y32 = random(&mut rng, &[3, 2]);
        let y23 = random(&mut rng, &[2, 3]);
        let r3 = random(&mut rng, &[3]);
        let w = random(&mut rng, &[2, 3]);
        let weighted = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let wv = g.constant(Tensor::from_fn(g.shape(v).to_vec(), |i| {
                0.3 + 0.17 * (i as f64) - 0.05 * (i * i) as f64
            }));
            let p = g.mul(v, wv)?;
            Ok(g.sum(p))
        };
        check_op(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                weighted(g, m)
            },
            &[x23.clone(), y32.clone()],
        );
        check_op(
            |g, v| {
                let m = g.transpose(v[0])?;
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.add(v[0], v[1])?;
                weighted(g, m)
            },
            &[x23.clone(), r3.clone()],
        );
        check_op(
            |g, v| {
                let m = g.sub(v[0], v[1])?;
                weighted(g, m)
            },
            &[x23.clone(), r3.clone()],
        );
        check_op(
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                weighted(g, m)
            },
            &[x23.clone(), r3.clone()],
        );
        check_op(
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                weighted(g, m)
            },
            &[x23.clone(), y23.clone()],
        );
        check_op(
            |g, v| {
                let m = g.scale(v[0], -1.7);
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.exp(v[0]);
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        let pos = Tensor::from_fn([2, 3], |i| 0.5 + x23.data()[i].abs());
        check_op(
            |g, v| {
                let m = g.log(v[0]);
                weighted(g, m)
            },
            &[pos],
        );
        check_op(
            |g, v| {
                let m = g.relu(v[0]);
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.gelu(v[0]);
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.mean(v[0]);
                let s = g.mul(m, m)?;
                Ok(s)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.softmax_rows(v[0])?;
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.log_softmax_rows(v[0])?;
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
        check_op(
            |g, v| {
                let m = g.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
                weighted(g, m)
            },
            &[x23.clone(), r3.clone(), random(&mut rng, &[3])],
        );
        check_op(
            |g, v| {
                let m = g.embedding(v[0], &[1, 0, 1, 1])?;
                weighted(g, m)
            },
            std::slice::from_ref(&w),
        );
        check_op(
            |g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(5);
                let m = g.dropout(v[0], 0.4, &mut r)?;
                weighted(g, m)
            },
            std::slice::from_ref(&x23),
        );
    }

    #[test]
    fn attention_grad_check_with_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = AttentionSpec {
            batch: 2,
            q_len: 3,
            k_len: 3,
            heads: 2,
            key_valid: Some(vec![true, true, false, true, true, true]),
            causal: true,
        };
        let q = random(&mut rng, &[6, 4]);
        let k = random(&mut rng, &[6, 4]);
        let v = random(&mut rng, &[6, 4]);
        check_op(
            |g, vars| {
                let o = g.attention(vars[0], vars[1], vars[2], &spec)?;
                let w = g.constant(Tensor::from_fn([6, 4], |i| ((i * 7) % 5) as f64 - 2.0));
                let p = g.mul(o, w)?;
                Ok(g.sum(p))
            },
            &[q, k, v],
        );
        let cross = AttentionSpec {
            batch: 2,
            q_len: 2,
            k_len: 3,
            heads: 1,
            key_valid: Some(vec![true, false, true, true, true, false]),
            causal: false,
        };
        let q = random(&mut rng, &[4, 2]);
        let k = random(&mut rng, &[6, 2]);
        let v = random(&mut rng, &[6, 2]);
        check_op(
            |g, vars| {
                let o = g.attention(vars[0], vars[1], vars[2], &cross)?;
                let s = g.mul(o, o)?;
                Ok(g.sum(s))
            },
            &[q, k, v],
        );
    }

    #[test]
    fn attention_closed_form_cases() {
        // single head, dim 1: q = 1, keys 0 and ln 3 give scores [0, ln 3]
        let spec = AttentionSpec {
            batch: 1,
            q_len: 1,
            k_len: 2,
            heads: 1,
            key_valid: None,
            causal: false,
        };
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1], &[1.0]));
        let k = g.constant(t(&[2, 1], &[0.0, 3f64.ln()]));
        let v = g.constant(t(&[2, 1], &[2.0, 10.0]));
        let o = g.attention(q, k, v, &spec).unwrap();
        assert!((g.value(o).data()[0] - (0.25 * 2.0 + 0.75 * 10.0)).abs() < 1e-12);

        // uniform scores and a single surviving key
        let mut g = Graph::<f64>::new();
        let q = g.param(Tensor::zeros([1, 2]));
        let k = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut spec = AttentionSpec {
            batch: 1,
            q_len: 1,
            k_len: 3,
            heads: 1,
            key_valid: None,
            causal: false,
        };
        let o = g.attention(q, k, v, &spec).unwrap();
        assert_eq!(g.attention_weights(o).unwrap(), &[1.0 / 3.0; 3]);
        spec.key_valid = Some(vec![false, true, false]);
        let o = g.attention(q, k, v, &spec).unwrap();
        assert_eq!(g.value(o).data(), &[3.0, 4.0]);

        spec.key_valid = Some(vec![true, true]);
        assert!(matches!(
            g.attention(q, k, v, &spec),
            Err(EkdError::Shape(_))
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::from_fn([16, 8], |_| rng.gen_range(-1.0..1.0)));
            let b = g.param(Tensor::from_fn([8, 12], |_| rng.gen_range(-1.0..1.0)));
            let c = g.matmul(a, b).unwrap();
            let s = g.log_softmax_rows(c).unwrap();
            let l = g.sum(s);
            g.backward(l).unwrap();
            (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let mut g = Graph::<f64>::new();
            let n = row.len();
            let x = g.constant(Tensor::new([1, n], row.clone()).unwrap());
            let y = g.softmax_rows(x).unwrap();
            let total: f64 = g.value(y).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let xs = g.constant(Tensor::new([1, n], row.iter().map(|v| v + shift).collect()).unwrap());
            let ys = g.softmax_rows(xs).unwrap();
            for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_matches_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let want = naive_matmul(m, k, n, a.data(), b.data());
            let mut g = Graph::<f64>::new();
            let (va, vb) = (g.constant(a), g.constant(b));
            let c = g.matmul(va, vb).unwrap();
            for (x, y) in g.value(c).data().iter().zip(&want) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}
