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

use crate::error::{EkdError, Result};
use crate::model::{Mode, TransformerModel};
use crate::par;
use crate::tensor::Graph;
use crate::text::{batch_by_tokens, EncodedPair};

/// Eval-mode teacher logits for every training pair, computed once.
///
/// A frozen teacher gives the same distribution for a pair at every step, so
/// storing them avoids one teacher forward pass per update.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    fingerprint: String,
    vocab_size: usize,
    /// Per pair, `[tgt_len, vocab]` row-major.
    logits: Vec<Vec<f32>>,
}

impl TeacherCache {
    /// Bytes the cache would occupy.
    pub fn bytes_needed(pairs: &[EncodedPair], vocab_size: usize) -> usize {
        pairs.iter().map(|p| p.tgt.len()).sum::<usize>() * vocab_size * 4
    }

    pub fn build(
        teacher: &TransformerModel<f32>,
        pairs: &[EncodedPair],
        max_tokens: usize,
    ) -> Result<Self> {
        let v = teacher.config().vocab_size;
        let batches = batch_by_tokens(pairs, max_tokens, 0)?;
        let outputs = par::map_indexed(batches.len(), |i| -> Result<Vec<(usize, Vec<f32>)>> {
            let b = &batches[i];
            let mut g = Graph::no_grad();
            let p = teacher.bind(&mut g, false);
            let logits = teacher.forward_batch(&mut g, &p, &b.src, &b.tgt_in, &mut Mode::Eval)?;
            let data = g.value(logits).data();
            let t = b.tgt_in.len;
            Ok(b.indices
                .iter()
                .enumerate()
                .map(|(row, &idx)| {
                    let n = pairs[idx].tgt.len();
                    (idx, data[row * t * v..(row * t + n) * v].to_vec())
                })
                .collect())
        });
        let mut logits = vec![Vec::new(); pairs.len()];
        for out in outputs {
            for (idx, l) in out? {
                logits[idx] = l;
            }
        }
        Ok(Self {
            fingerprint: teacher.fingerprint(),
            vocab_size: v,
            logits,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Logits padded to `[indices.len() * len, vocab]`; rows past a pair's
    /// target length are zero.
    pub fn gather(&self, indices: &[usize], len: usize) -> Result<Vec<f32>> {
        let v = self.vocab_size;
        let mut out = vec![0.0; indices.len() * len * v];
        for (row, &idx) in indices.iter().enumerate() {
            let l = self
                .logits
                .get(idx)
                .ok_or_else(|| EkdError::Contract(format!("teacher cache has no pair {idx}")))?;
            if l.len() > len * v {
                return Err(EkdError::Shape(format!(
                    "cached pair {idx} longer than batch length {len}"
                )));
            }
            out[row * len * v..row * len * v + l.len()].copy_from_slice(l);
        }
        Ok(out)
    }
}
