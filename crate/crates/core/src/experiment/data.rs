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

use std::path::PathBuf;

use log::info;
use sha2::{Digest, Sha256};

use super::config::Settings;
use crate::error::Result;
use crate::text::{
    build_joint_vocab, gen_synthetic, learn_bpe, read_parallel, write_parallel, BpeTable,
    EncodedPair, ParallelCorpus, Vocabulary,
};

/// Corpus, BPE and vocabulary locations. Every file defaults to a standard
/// name inside `[data] dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub train: (PathBuf, PathBuf),
    pub valid: (PathBuf, PathBuf),
    pub test: (PathBuf, PathBuf),
    pub bpe: PathBuf,
    pub vocab: PathBuf,
}

impl DataPaths {
    pub fn from_settings(s: &Settings) -> Self {
        let dir = s
            .path("data", "dir")
            .unwrap_or_else(|| s.base_dir().join("data"));
        let file =
            |key: &str, default: &str| s.path("data", key).unwrap_or_else(|| dir.join(default));
        Self {
            train: (
                file("train_src", "train.src"),
                file("train_tgt", "train.tgt"),
            ),
            valid: (
                file("valid_src", "valid.src"),
                file("valid_tgt", "valid.tgt"),
            ),
            test: (file("test_src", "test.src"), file("test_tgt", "test.tgt")),
            bpe: file("bpe", "bpe.codes"),
            vocab: file("vocab", "vocab.txt"),
        }
    }
}

/// Sizes and seed of the generated task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub bpe_merges: usize,
}

impl SyntheticSpec {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        Ok(Self {
            seed: s.get_or("synthetic", "seed", 1)?,
            vocab_size: s.get_or("synthetic", "vocab_size", 64)?,
            train: s.get_or("synthetic", "train", 5000)?,
            valid: s.get_or("synthetic", "valid", 500)?,
            test: s.get_or("synthetic", "test", 500)?,
            min_len: s.get_or("synthetic", "min_len", 3)?,
            max_len: s.get_or("synthetic", "max_len", 10)?,
            bpe_merges: s.get_or("data", "bpe_merges", 8000)?,
        })
    }
}

/// Generate the three splits, learn BPE on the training side and write the
/// shared vocabulary.
pub fn make_data(spec: &SyntheticSpec, paths: &DataPaths) -> Result<Vocabulary> {
    let total = spec.train + spec.valid + spec.test;
    let all = gen_synthetic(
        spec.seed,
        total,
        (spec.min_len, spec.max_len),
        spec.vocab_size,
    )?;
    let train = all.slice(0, spec.train);
    let valid = all.slice(spec.train, spec.valid);
    let test = all.slice(spec.train + spec.valid, spec.test);
    write_parallel(&train, &paths.train.0, &paths.train.1)?;
    write_parallel(&valid, &paths.valid.0, &paths.valid.1)?;
    write_parallel(&test, &paths.test.0, &paths.test.1)?;
    let (bpe, vocab) = learn_shared(&train, spec.bpe_merges)?;
    bpe.save(&paths.bpe)?;
    vocab.save(&paths.vocab)?;
    info!(
        "wrote {} / {} / {} pairs, {} merges, vocabulary of {}",
        spec.train,
        spec.valid,
        spec.test,
        bpe.merges().len(),
        vocab.len()
    );
    Ok(vocab)
}

/// One BPE table and one vocabulary over both sides of `train`.
pub fn learn_shared(train: &ParallelCorpus, merges: usize) -> Result<(BpeTable, Vocabulary)> {
    let both: Vec<&String> = train.src.iter().chain(&train.tgt).collect();
    let bpe = learn_bpe(&both, merges)?;
    let vocab = build_joint_vocab(&train.src, &train.tgt, &bpe)?;
    Ok((bpe, vocab))
}

/// Encoded splits plus the tokenizer that produced them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub bpe: BpeTable,
    pub vocab: Vocabulary,
    pub train: Vec<EncodedPair>,
    pub valid_src: Vec<Vec<u32>>,
    pub valid_refs: Vec<String>,
    pub test_src: Vec<Vec<u32>>,
    pub test_refs: Vec<String>,
    /// Fingerprint of the test split, used to refuse cross-split comparisons.
    pub test_hash: String,
}

impl PreparedData {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let bpe = BpeTable::load(&paths.bpe)?;
        let vocab = Vocabulary::load(&paths.vocab)?;
        let train = read_parallel(&paths.train.0, &paths.train.1)?;
        let valid = read_parallel(&paths.valid.0, &paths.valid.1)?;
        let test = read_parallel(&paths.test.0, &paths.test.1)?;
        Ok(Self::from_corpora(bpe, vocab, &train, &valid, &test))
    }

    pub fn from_corpora(
        bpe: BpeTable,
        vocab: Vocabulary,
        train: &ParallelCorpus,
        valid: &ParallelCorpus,
        test: &ParallelCorpus,
    ) -> Self {
        let enc = |s: &String| vocab.encode(s, &bpe);
        let detok = |s: &String| bpe.join(&bpe.segment(s));
        let train_pairs = train
            .src
            .iter()
            .zip(&train.tgt)
            .map(|(s, t)| EncodedPair {
                src: enc(s),
                tgt: enc(t),
            })
            .collect();
        let mut h = Sha256::new();
        for (s, t) in test.src.iter().zip(&test.tgt) {
            h.update(s.as_bytes());
            h.update(b"\t");
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        Self {
            train: train_pairs,
            valid_src: valid.src.iter().map(enc).collect(),
            valid_refs: valid.tgt.iter().map(detok).collect(),
            test_src: test.src.iter().map(enc).collect(),
            test_refs: test.tgt.iter().map(detok).collect(),
            test_hash: format!("{:x}", h.finalize()),
            bpe,
            vocab,
        }
    }

    /// Detokenize model output.
    pub fn detok(&self, ids: &[u32]) -> String {
        self.vocab.decode(ids, &self.bpe)
    }
}
