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

use rand_chacha::ChaCha8Rng;

use super::{Bound, TransformerModel};
use crate::error::{EkdError, Result};
use crate::tensor::{AttentionSpec, Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Evaluation disables dropout; training draws dropout masks from `rng`.
pub enum Mode<'a> {
    Eval,
    Train {
        rng: &'a mut ChaCha8Rng,
        dropout: f64,
    },
}

/// Right-padded batch of token-id sequences, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedIds {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    /// `true` at real tokens, `false` at padding.
    pub valid: Vec<bool>,
}

impl PaddedIds {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], pad: u32) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![pad as usize; batch * len];
        let mut valid = vec![false; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.as_ref().iter().enumerate() {
                ids[b * len + t] = tok as usize;
                valid[b * len + t] = true;
            }
        }
        Self {
            batch,
            len,
            ids,
            valid,
        }
    }
}

fn sinusoid_table(batch: usize, len: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * len * dim);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..dim {
                let pair = (i / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
                out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    out
}

impl<F: Scalar> TransformerModel<F> {
    fn check_ids(&self, x: &PaddedIds, side: &str) -> Result<()> {
        if x.len > self.config.max_positions {
            return Err(EkdError::Length(format!(
                "{side} length {} exceeds max_positions {}",
                x.len, self.config.max_positions
            )));
        }
        if let Some(&bad) = x.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(EkdError::Vocab(format!(
                "{side} token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train { rng, dropout } => g.dropout(x, *dropout, *rng),
        }
    }

    fn linear(&self, g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(&format!("{prefix}.weight"))?)?;
        g.add(y, p.get(&format!("{prefix}.bias"))?)
    }

    fn norm(&self, g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{prefix}.gain"))?;
        let bias = p.get(&format!("{prefix}.bias"))?;
        g.layer_norm_rows(x, gain, bias, LN_EPS)
    }

    /// Project queries/keys/values, attend, concatenate heads and project out.
    pub fn multi_head_attention(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        prefix: &str,
        query: Var,
        memory: Var,
        spec: &AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(g, p, &format!("{prefix}.q_proj"), query)?;
        let k = self.linear(g, p, &format!("{prefix}.k_proj"), memory)?;
        let v = self.linear(g, p, &format!("{prefix}.v_proj"), memory)?;
        let o = g.attention(q, k, v, spec)?;
        self.linear(g, p, &format!("{prefix}.o_proj"), o)
    }

    fn feed_forward(&self, g: &mut Graph<F>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, p, &format!("{prefix}.fc1"), x)?;
        let h = g.relu(h);
        self.linear(g, p, &format!("{prefix}.fc2"), h)
    }

    fn embed(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: &PaddedIds,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let e = g.embedding(p.get("embed.weight")?, &x.ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let pe = g.constant(Tensor::from_f64(
            [x.batch * x.len, d],
            &sinusoid_table(x.batch, x.len, d),
        )?);
        let e = g.add(e, pe)?;
        self.dropout(g, e, mode)
    }

    /// Encoder states `[batch * src_len, embed_dim]`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        src: &PaddedIds,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_ids(src, "source")?;
        let mut x = self.embed(g, p, src, mode)?;
        let spec = AttentionSpec {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            heads: self.config.heads,
            key_valid: Some(src.valid.clone()),
            causal: false,
        };
        for l in 0..self.config.layers {
            let pre = format!("encoder.layers.{l}");
            let h = self.norm(g, p, &format!("{pre}.self_attn_norm"), x)?;
            let a = self.multi_head_attention(g, p, &format!("{pre}.self_attn"), h, h, &spec)?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = self.norm(g, p, &format!("{pre}.ffn_norm"), x)?;
            let f = self.feed_forward(g, p, &format!("{pre}.ffn"), h)?;
            let f = self.dropout(g, f, mode)?;
            x = g.add(x, f)?;
        }
        self.norm(g, p, "encoder.final_norm", x)
    }

    /// Next-token logits `[batch * tgt_len, vocab]` for decoder inputs
    /// `tgt_in` attending to `memory` (`[batch * mem_len, embed_dim]`).
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        memory: Var,
        memory_valid: &[bool],
        mem_len: usize,
        tgt_in: &PaddedIds,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let y = self.decode_states(g, p, memory, memory_valid, mem_len, tgt_in, mode)?;
        let et = g.transpose(p.get("embed.weight")?)?;
        g.matmul(y, et)
    }

    /// Final decoder states `[batch * tgt_len, embed_dim]`, before the
    /// output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_states(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        memory: Var,
        memory_valid: &[bool],
        mem_len: usize,
        tgt_in: &PaddedIds,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.check_ids(tgt_in, "target")?;
        let mut y = self.embed(g, p, tgt_in, mode)?;
        let self_spec = AttentionSpec {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            heads: self.config.heads,
            key_valid: Some(tgt_in.valid.clone()),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: mem_len,
            heads: self.config.heads,
            key_valid: Some(memory_valid.to_vec()),
            causal: false,
        };
        for l in 0..self.config.layers {
            let pre = format!("decoder.layers.{l}");
            let h = self.norm(g, p, &format!("{pre}.self_attn_norm"), y)?;
            let a =
                self.multi_head_attention(g, p, &format!("{pre}.self_attn"), h, h, &self_spec)?;
            let a = self.dropout(g, a, mode)?;
            y = g.add(y, a)?;
            let h = self.norm(g, p, &format!("{pre}.cross_attn_norm"), y)?;
            let a = self.multi_head_attention(
                g,
                p,
                &format!("{pre}.cross_attn"),
                h,
                memory,
                &cross_spec,
            )?;
            let a = self.dropout(g, a, mode)?;
            y = g.add(y, a)?;
            let h = self.norm(g, p, &format!("{pre}.ffn_norm"), y)?;
            let f = self.feed_forward(g, p, &format!("{pre}.ffn"), h)?;
            let f = self.dropout(g, f, mode)?;
            y = g.add(y, f)?;
        }
        self.norm(g, p, "decoder.final_norm", y)
    }

    /// Teacher-forced logits for a padded batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        src: &PaddedIds,
        tgt_in: &PaddedIds,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if src.batch != tgt_in.batch {
            return Err(EkdError::Shape(format!(
                "source batch {} != target batch {}",
                src.batch, tgt_in.batch
            )));
        }
        let memory = self.encode(g, p, src, mode)?;
        self.decode(g, p, memory, &src.valid, src.len, tgt_in, mode)
    }

    /// Evaluation-mode logits `[len(tgt_prefix), vocab]`; row `t` scores the
    /// token following `tgt_prefix[..=t]`.
    pub fn forward(&self, src_tokens: &[u32], tgt_prefix: &[u32]) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad();
        let p = self.bind(&mut g, false);
        let src = PaddedIds::from_sequences(&[src_tokens], 0);
        let tgt = PaddedIds::from_sequences(&[tgt_prefix], 0);
        let logits = self.forward_batch(&mut g, &p, &src, &tgt, &mut Mode::Eval)?;
        Ok(g.value(logits).clone())
    }
}
