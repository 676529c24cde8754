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

//! Evolving knowledge distillation for compact transformer translation models.
//!
//! A small student is distilled through a capacity-ascending chain of frozen
//! teachers, carrying its parameters from one stage to the next. The crate
//! bundles everything needed to run that end to end on a CPU:
//!
//! - [`tensor`]: dense tensors with a reverse-mode gradient tape
//! - [`model`]: a pre-norm transformer encoder-decoder with shared embeddings
//! - [`text`]: pre-tokenization, BPE, vocabularies, batching and a synthetic task
//! - [`losses`]: label-smoothed cross-entropy, soft-label KL and stage mixtures
//! - [`train`]: Adam, the inverse square-root schedule, stage loops and checkpoints
//! - [`decode`]: greedy and beam decoding, corpus BLEU, gap and FLOPs accounting
//! - [`experiment`]: plans, hierarchy checks, baselines, reports and config files
//!
//! Heavy inner loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise. Both paths produce
//! bit-identical results.

pub mod decode;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod par;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{EkdError, Result};
