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

use std::fmt;
use std::str::FromStr;

use crate::error::{EkdError, Result};
use crate::model::ModelConfig;

/// Difference between a student and its teacher on one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    pub student_metric: f64,
    pub teacher_metric: f64,
    /// `teacher - student`
    pub abs_gap: f64,
    /// `abs_gap / teacher * 100`
    pub pct_gap: f64,
}

pub fn gap_report(student_metric: f64, teacher_metric: f64) -> Result<GapReport> {
    if teacher_metric.is_nan() || teacher_metric <= 0.0 || !student_metric.is_finite() {
        return Err(EkdError::Contract(format!(
            "gap needs a positive teacher metric, got teacher {teacher_metric}, student {student_metric}"
        )));
    }
    let abs_gap = teacher_metric - student_metric;
    Ok(GapReport {
        student_metric,
        teacher_metric,
        abs_gap,
        pct_gap: abs_gap / teacher_metric * 100.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsMode {
    Forward,
    /// Forward plus backward, counted as three forward passes.
    Train,
}

impl FromStr for FlopsMode {
    type Err = EkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "train" => Ok(Self::Train),
            other => Err(EkdError::Config(format!("unknown FLOPs mode {other:?}"))),
        }
    }
}

impl fmt::Display for FlopsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Train => "train",
        })
    }
}

/// Forward FLOPs for one token passing through the encoder and the decoder,
/// counting a multiply-add as two FLOPs.
///
/// Encoder layer: four `d x d` attention projections and the two FFN
/// matrices. Decoder layer: eight projections (self and cross attention)
/// and the FFN. Output: the `d x V` projection. Terms that grow with the
/// sequence length (attention scores) are left out.
pub fn flops_per_token(config: &ModelConfig) -> f64 {
    let d = config.embed_dim as f64;
    let f = config.ffn_dim as f64;
    let l = config.layers as f64;
    let v = config.vocab_size as f64;
    let enc = 2.0 * (4.0 * d * d + 2.0 * d * f);
    let dec = 2.0 * (8.0 * d * d + 2.0 * d * f);
    l * (enc + dec) + 2.0 * d * v
}

pub fn flops_estimate(config: &ModelConfig, total_tokens: u64, mode: FlopsMode) -> f64 {
    let forward = flops_per_token(config) * total_tokens as f64;
    match mode {
        FlopsMode::Forward => forward,
        FlopsMode::Train => 3.0 * forward,
    }
}

/// Training the student while a frozen teacher runs forward on every token.
pub fn distill_flops(
    student: &ModelConfig,
    teacher: Option<&ModelConfig>,
    total_tokens: u64,
) -> f64 {
    flops_estimate(student, total_tokens, FlopsMode::Train)
        + teacher.map_or(0.0, |t| flops_estimate(t, total_tokens, FlopsMode::Forward))
}
