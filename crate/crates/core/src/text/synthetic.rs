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
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::ParallelCorpus;
use crate::error::{EkdError, Result};

pub const EVEN_MARKER: &str = "even";
pub const ODD_MARKER: &str = "odd";

/// Toy translation rule over the words `w0 .. w{n-1}`: map every source word
/// through a seeded bijection, reverse the sentence, and prepend a marker for
/// the parity of its length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    mapping: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(seed: u64, vocab_size: usize) -> Result<Self> {
        if vocab_size < 8 {
            return Err(EkdError::Config(format!(
                "synthetic vocab_size must be at least 8, got {vocab_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mapping: Vec<usize> = (0..vocab_size).collect();
        mapping.shuffle(&mut rng);
        Ok(Self { mapping })
    }

    pub fn vocab_size(&self) -> usize {
        self.mapping.len()
    }

    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    /// Apply the rule to a source sentence; `None` if a word is not in the
    /// task vocabulary.
    pub fn translate(&self, src: &str) -> Option<String> {
        let words: Vec<&str> = src.split_whitespace().collect();
        let mut out = vec![if words.len().is_multiple_of(2) {
            EVEN_MARKER
        } else {
            ODD_MARKER
        }
        .to_string()];
        for w in words.iter().rev() {
            let i: usize = w.strip_prefix('w')?.parse().ok()?;
            out.push(Self::word(*self.mapping.get(i)?));
        }
        Some(out.join(" "))
    }
}

/// Deterministic parallel corpus of `n_pairs` sentences for the task seeded
/// with `seed`, with source lengths drawn uniformly from `len_range`.
pub fn gen_synthetic(
    seed: u64,
    n_pairs: usize,
    len_range: (usize, usize),
    vocab_size: usize,
) -> Result<ParallelCorpus> {
    let (lo, hi) = len_range;
    if lo < 2 || hi > 64 || lo > hi {
        return Err(EkdError::Config(format!(
            "synthetic lengths must satisfy 2 <= min <= max <= 64, got {lo}..={hi}"
        )));
    }
    let task = SyntheticTask::new(seed, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut src = Vec::with_capacity(n_pairs);
    let mut tgt = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(lo..=hi);
        let words: Vec<String> = (0..len)
            .map(|_| SyntheticTask::word(rng.gen_range(0..vocab_size)))
            .collect();
        let s = words.join(" ");
        tgt.push(task.translate(&s).expect("generated words are in range"));
        src.push(s);
    }
    ParallelCorpus::new(src, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_rule_consistent() {
        let a = gen_synthetic(7, 50, (2, 6), 10).unwrap();
        assert_eq!(a, gen_synthetic(7, 50, (2, 6), 10).unwrap());
        assert_ne!(a, gen_synthetic(8, 50, (2, 6), 10).unwrap());
        let task = SyntheticTask::new(7, 10).unwrap();
        for (s, t) in a.src.iter().zip(&a.tgt) {
            let n = s.split_whitespace().count();
            assert!((2..=6).contains(&n));
            assert_eq!(task.translate(s).as_deref(), Some(t.as_str()));
        }
    }

    #[test]
    fn rule_by_hand() {
        let task = SyntheticTask {
            mapping: vec![3, 0, 1, 2, 7, 6, 5, 4],
        };
        assert_eq!(task.translate("w0 w1 w4").unwrap(), "odd w7 w0 w3");
        assert_eq!(task.translate("w2 w2").unwrap(), "even w1 w1");
        assert_eq!(task.translate("w9"), None);
    }

    #[test]
    fn mapping_is_a_bijection() {
        let mut m = SyntheticTask::new(3, 32).unwrap().mapping;
        m.sort_unstable();
        assert_eq!(m, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_parameters() {
        assert!(gen_synthetic(0, 5, (1, 4), 10).is_err());
        assert!(gen_synthetic(0, 5, (2, 65), 10).is_err());
        assert!(gen_synthetic(0, 5, (2, 4), 7).is_err());
    }
}
