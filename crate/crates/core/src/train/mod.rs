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

//! Optimizer, learning-rate schedule, the stage training loop and
//! checkpoints.

mod cache;
mod checkpoint;
mod metrics;
mod optim;
mod stage;

pub use cache::TeacherCache;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use metrics::{read_metrics, write_metrics, MetricRow, METRICS_HEADER};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimState};
pub use stage::{
    train_stage, validation_bleu, BestEpoch, StageConfig, StageOutcome, StageProgress, Teacher,
    TrainData,
};

/// Independent seed for `(stream, index)` derived from a base seed
/// (SplitMix64 finalizer over the mixed inputs).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
