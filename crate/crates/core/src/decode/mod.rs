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

//! Decoding, BLEU, student/teacher gaps and training cost estimates.

mod bleu;
mod cost;
mod search;

pub use bleu::{bleu, BleuStats, Smoothing};
pub use cost::{distill_flops, flops_estimate, flops_per_token, gap_report, FlopsMode, GapReport};
pub use search::{
    beam_batch, beam_search, greedy_batch, greedy_decode, score_sequence, Hypothesis, MaxLen,
    DECODE_CHUNK,
};
