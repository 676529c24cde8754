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

//! Text side of the pipeline: pre-tokenization, BPE, the shared vocabulary,
//! token-budget batching, corpus files and the synthetic translation task.

mod batch;
mod bpe;
mod corpus;
mod pretok;
mod synthetic;
mod vocab;

pub use batch::{batch_by_tokens, EncodedPair, TokenizedBatch};
pub use bpe::{learn_bpe, BpeTable, DEFAULT_MARKER};
pub use corpus::{read_lines, read_parallel, write_lines, write_parallel, ParallelCorpus};
pub use pretok::pretokenize;
pub use synthetic::{gen_synthetic, SyntheticTask, EVEN_MARKER, ODD_MARKER};
pub use vocab::{build_joint_vocab, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};
