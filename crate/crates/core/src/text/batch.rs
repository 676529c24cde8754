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

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{BOS, PAD};
use crate::error::{EkdError, Result};
use crate::model::PaddedIds;

/// One sentence pair as eos-terminated id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    fn cost(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

/// Padded batch ready for the model. `tgt_in` is the target shifted right
/// behind a bos id; `tgt_out` is the eos-terminated target.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    /// Positions of the member pairs in the dataset.
    pub indices: Vec<usize>,
    pub src: PaddedIds,
    pub tgt_in: PaddedIds,
    pub tgt_out: PaddedIds,
    /// Non-pad target tokens.
    pub token_count: usize,
}

impl TokenizedBatch {
    pub fn from_pairs(pairs: &[EncodedPair], indices: Vec<usize>) -> Self {
        let src: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].src.as_slice()).collect();
        let out: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].tgt.as_slice()).collect();
        let inp: Vec<Vec<u32>> = out
            .iter()
            .map(|t| {
                std::iter::once(BOS)
                    .chain(t[..t.len().saturating_sub(1)].iter().copied())
                    .collect()
            })
            .collect();
        let token_count = out.iter().map(|t| t.len()).sum();
        Self {
            indices,
            src: PaddedIds::from_sequences(&src, PAD),
            tgt_in: PaddedIds::from_sequences(&inp, PAD),
            tgt_out: PaddedIds::from_sequences(&out, PAD),
            token_count,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Padded size of the larger side, which the budget bounds.
    pub fn padded_tokens(&self) -> usize {
        self.len() * self.src.len.max(self.tgt_out.len)
    }
}

/// Partition `pairs` into batches whose padded size (sentences times the
/// longest side) stays within `max_tokens`.
///
/// Pairs are shuffled with `seed`, stably sorted by length so batches hold
/// similar lengths, packed greedily, and the batch order is shuffled again.
pub fn batch_by_tokens(
    pairs: &[EncodedPair],
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<TokenizedBatch>> {
    if let Some((i, p)) = pairs
        .iter()
        .enumerate()
        .find(|(_, p)| p.cost() > max_tokens)
    {
        return Err(EkdError::Length(format!(
            "sentence {i} has {} tokens, more than the batch budget of {max_tokens}",
            p.cost()
        )));
    }
    if let Some(i) = pairs.iter().position(|p| p.tgt.is_empty()) {
        return Err(EkdError::Data(format!("sentence {i} has an empty target")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].tgt.len(), pairs[i].src.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(pairs[i].cost());
        if !current.is_empty() && (current.len() + 1) * w > max_tokens {
            groups.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(pairs[i].cost());
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| TokenizedBatch::from_pairs(pairs, g))
        .collect())
}
