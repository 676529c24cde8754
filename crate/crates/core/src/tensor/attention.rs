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

//! Fused multi-head scaled dot-product attention kernels.

use super::Scalar;
use crate::error::{EkdError, Result};
use crate::par;

/// Layout and masking for one attention call.
///
/// Queries are `[batch * q_len, dim]`, keys and values `[batch * k_len, dim]`;
/// each row block belongs to one sequence. `dim` is split evenly across
/// `heads` and the per-head outputs are concatenated back to `dim` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `true` for keys that may be attended, `batch * k_len` entries.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` only sees keys `j <= i`. Requires `q_len == k_len`.
    pub causal: bool,
}

impl AttentionSpec {
    pub(crate) fn validate(&self, q: &[usize], k: &[usize], v: &[usize]) -> Result<usize> {
        let dim = match q {
            [_, d] => *d,
            _ => {
                return Err(EkdError::Shape(format!(
                    "attention query must be 2-D, got {q:?}"
                )))
            }
        };
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(EkdError::Shape(format!(
                "dimension {dim} not divisible by {} heads",
                self.heads
            )));
        }
        if q != [self.batch * self.q_len, dim] {
            return Err(EkdError::Shape(format!(
                "query shape {q:?} does not match batch {} x q_len {}",
                self.batch, self.q_len
            )));
        }
        let kv = [self.batch * self.k_len, dim];
        if k != kv || v != kv {
            return Err(EkdError::Shape(format!(
                "key {k:?} / value {v:?} shapes must both be {kv:?}"
            )));
        }
        if let Some(mask) = &self.key_valid {
            if mask.len() != self.batch * self.k_len {
                return Err(EkdError::Shape(format!(
                    "mask covers {} keys, expected {}",
                    mask.len(),
                    self.batch * self.k_len
                )));
            }
        }
        if self.causal && self.q_len != self.k_len {
            return Err(EkdError::Shape(format!(
                "causal attention needs q_len == k_len, got {} and {}",
                self.q_len, self.k_len
            )));
        }
        Ok(dim)
    }

    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            Some(mask) => mask[b * self.k_len + j],
            None => true,
        }
    }
}

struct UnitOut<F> {
    probs: Vec<F>,
    out: Vec<F>,
}

/// Returns `(output [batch*q_len, dim], probs [batch, heads, q_len, k_len])`.
/// A query with no admissible key gets an all-zero output row.
pub(crate) fn forward<F: Scalar>(
    spec: &AttentionSpec,
    dim: usize,
    q: &[F],
    k: &[F],
    v: &[F],
) -> (Vec<F>, Vec<F>) {
    let (tq, tk, h) = (spec.q_len, spec.k_len, spec.heads);
    let dh = dim / h;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let units = par::map_indexed(spec.batch * h, |u| {
        let (b, hd) = (u / h, u % h);
        let col = hd * dh;
        let mut probs = vec![F::zero(); tq * tk];
        let mut out = vec![F::zero(); tq * dh];
        for i in 0..tq {
            let qi = &q[(b * tq + i) * dim + col..][..dh];
            let row = &mut probs[i * tk..(i + 1) * tk];
            let mut max = F::neg_infinity();
            let mut any = false;
            for j in 0..tk {
                if !spec.allowed(b, i, j) {
                    continue;
                }
                let kj = &k[(b * tk + j) * dim + col..][..dh];
                let s = qi
                    .iter()
                    .zip(kj)
                    .fold(F::zero(), |acc, (&x, &y)| acc + x * y)
                    * scale;
                row[j] = s;
                max = max.max(s);
                any = true;
            }
            if !any {
                row.iter_mut().for_each(|p| *p = F::zero());
                continue;
            }
            let mut total = F::zero();
            for (j, x) in row.iter_mut().enumerate().take(tk) {
                if spec.allowed(b, i, j) {
                    *x = (*x - max).exp();
                    total += *x;
                } else {
                    *x = F::zero();
                }
            }
            for p in row.iter_mut() {
                *p = *p / total;
            }
            let oi = &mut out[i * dh..(i + 1) * dh];
            for j in 0..tk {
                let p = row[j];
                if p == F::zero() {
                    continue;
                }
                let vj = &v[(b * tk + j) * dim + col..][..dh];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
        UnitOut { probs, out }
    });

    let mut out = vec![F::zero(); spec.batch * tq * dim];
    let mut probs = Vec::with_capacity(spec.batch * h * tq * tk);
    for (u, unit) in units.into_iter().enumerate() {
        let (b, hd) = (u / h, u % h);
        for i in 0..tq {
            out[(b * tq + i) * dim + hd * dh..][..dh]
                .copy_from_slice(&unit.out[i * dh..(i + 1) * dh]);
        }
        probs.extend_from_slice(&unit.probs);
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Scalar>(
    spec: &AttentionSpec,
    dim: usize,
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (tq, tk, h) = (spec.q_len, spec.k_len, spec.heads);
    let dh = dim / h;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let units = par::map_indexed(spec.batch * h, |u| {
        let (b, hd) = (u / h, u % h);
        let col = hd * dh;
        let p = &probs[u * tq * tk..(u + 1) * tq * tk];
        let mut dq = vec![F::zero(); tq * dh];
        let mut dk = vec![F::zero(); tk * dh];
        let mut dv = vec![F::zero(); tk * dh];
        let mut dp = vec![F::zero(); tk];
        for i in 0..tq {
            let doi = &dout[(b * tq + i) * dim + col..][..dh];
            let pi = &p[i * tk..(i + 1) * tk];
            let mut dot = F::zero();
            for j in 0..tk {
                if pi[j] == F::zero() {
                    dp[j] = F::zero();
                    continue;
                }
                let vj = &v[(b * tk + j) * dim + col..][..dh];
                dp[j] = doi
                    .iter()
                    .zip(vj)
                    .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
                dot += pi[j] * dp[j];
                for (g, &x) in dv[j * dh..(j + 1) * dh].iter_mut().zip(doi) {
                    *g += pi[j] * x;
                }
            }
            let qi = &q[(b * tq + i) * dim + col..][..dh];
            for j in 0..tk {
                if pi[j] == F::zero() {
                    continue;
                }
                let ds = pi[j] * (dp[j] - dot) * scale;
                let kj = &k[(b * tk + j) * dim + col..][..dh];
                for (g, &x) in dq[i * dh..(i + 1) * dh].iter_mut().zip(kj) {
                    *g += ds * x;
                }
                for (g, &x) in dk[j * dh..(j + 1) * dh].iter_mut().zip(qi) {
                    *g += ds * x;
                }
            }
        }
        (dq, dk, dv)
    });

    let mut dq = vec![F::zero(); spec.batch * tq * dim];
    let mut dk = vec![F::zero(); spec.batch * tk * dim];
    let mut dv = vec![F::zero(); spec.batch * tk * dim];
    for (u, (uq, uk, uv)) in units.into_iter().enumerate() {
        let (b, hd) = (u / h, u % h);
        let col = hd * dh;
        for i in 0..tq {
            dq[(b * tq + i) * dim + col..][..dh].copy_from_slice(&uq[i * dh..(i + 1) * dh]);
        }
        for j in 0..tk {
            dk[(b * tk + j) * dim + col..][..dh].copy_from_slice(&uk[j * dh..(j + 1) * dh]);
            dv[(b * tk + j) * dim + col..][..dh].copy_from_slice(&uv[j * dh..(j + 1) * dh]);
        }
    }
    (dq, dk, dv)
}
