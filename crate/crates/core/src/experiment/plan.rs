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
use std::path::PathBuf;
use std::str::FromStr;

use log::warn;

use super::config::Settings;
use crate::error::{EkdError, Result};
use crate::losses::Formulation;
use crate::model::{count_params, ModelConfig};
use crate::train::derive_seed;

const STAGE_SEED_STREAM: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    /// Capacity-ascending chain of teachers, carrying the student forward.
    Ekd,
    SingleTeacher,
    /// Distil an assistant from the teacher, then the student from the assistant.
    Takd,
    /// No teacher: plain cross-entropy training.
    Scratch,
}

impl FromStr for PlanMode {
    type Err = EkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ekd" => Ok(Self::Ekd),
            "single_teacher" => Ok(Self::SingleTeacher),
            "takd" => Ok(Self::Takd),
            "scratch" => Ok(Self::Scratch),
            other => Err(EkdError::Config(format!(
                "unknown mode {other:?}, expected ekd, single_teacher, takd or scratch"
            ))),
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ekd => "ekd",
            Self::SingleTeacher => "single_teacher",
            Self::Takd => "takd",
            Self::Scratch => "scratch",
        })
    }
}

/// One distillation stage. `teacher == None` means plain training, or in
/// the assistant plan's second stage, the freshly trained assistant.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub label: String,
    pub teacher: Option<PathBuf>,
    pub mix_weight: f64,
    pub formulation: Formulation,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub name: String,
    pub mode: PlanMode,
    pub student: ModelConfig,
    pub student_seed: u64,
    pub stages: Vec<StageSpec>,
    /// Assistant dimensions (assistant mode only).
    pub assistant: Option<ModelConfig>,
    /// Keep Adam moments and the schedule position across stages.
    pub carry_optimizer: bool,
}

impl DistillPlan {
    /// Read `[experiment]`, `[model]`, `[assistant]` and `[stage.N]` sections.
    pub fn from_settings(s: &Settings, vocab_size: usize) -> Result<Self> {
        let mode: PlanMode = s.get_or("experiment", "mode", PlanMode::Ekd)?;
        let seed: u64 = s.get_or("experiment", "seed", 1)?;
        let mut stages = Vec::new();
        for k in 1.. {
            let sec = format!("stage.{k}");
            if !s.has_section(&sec) {
                break;
            }
            stages.push(StageSpec {
                label: sec.clone(),
                teacher: s.path(&sec, "teacher"),
                mix_weight: s.get_or(&sec, "mix_weight", 0.5)?,
                formulation: s.get_or(&sec, "formulation", Formulation::Convex)?,
                epochs: s.require(&sec, "epochs")?,
                seed: s.get_or(&sec, "seed", derive_seed(seed, STAGE_SEED_STREAM, k as u64))?,
            });
        }
        let assistant = if s.has_section("assistant") {
            Some(s.model_config("assistant", vocab_size)?)
        } else {
            None
        };
        let plan = Self {
            name: s.get_or("experiment", "name", mode.to_string())?,
            mode,
            student: s.model_config("model", vocab_size)?,
            student_seed: seed,
            stages,
            assistant,
            carry_optimizer: s.get_or("experiment", "carry_optimizer", false)?,
        };
        plan.check_shape()?;
        Ok(plan)
    }

    /// A one-stage plan that trains `model` without a teacher.
    pub fn scratch(name: &str, model: ModelConfig, seed: u64, epochs: usize) -> Self {
        Self {
            name: name.to_string(),
            mode: PlanMode::Scratch,
            student: model,
            student_seed: seed,
            stages: vec![StageSpec {
                label: "train".into(),
                teacher: None,
                mix_weight: 0.0,
                formulation: Formulation::Convex,
                epochs,
                seed: derive_seed(seed, STAGE_SEED_STREAM, 1),
            }],
            assistant: None,
            carry_optimizer: false,
        }
    }

    /// Structural checks that need no checkpoints.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.stages.len();
        let teachers = self.stages.iter().filter(|s| s.teacher.is_some()).count();
        let bad = |msg: String| Err(EkdError::Config(format!("{} plan: {msg}", self.mode)));
        match self.mode {
            PlanMode::Ekd if n == 0 || teachers != n => bad("every stage needs a teacher".into()),
            PlanMode::SingleTeacher if n != 1 || teachers != 1 => {
                bad("exactly one stage with a teacher".into())
            }
            PlanMode::Scratch if n == 0 || teachers != 0 => {
                bad("stages must not name teachers".into())
            }
            PlanMode::Takd
                if n != 2
                    || self.stages[0].teacher.is_none()
                    || self.stages[1].teacher.is_some() =>
            {
                bad(
                    "stage.1 names the teacher, stage.2 trains the student from the assistant"
                        .into(),
                )
            }
            PlanMode::Takd if self.assistant.is_none() => {
                bad("missing [assistant] model section".into())
            }
            _ => Ok(()),
        }
    }
}

/// Check that parameter counts strictly ascend from the student through
/// every teacher. Consecutive ratios outside `[2, 3]` are returned as
/// warnings.
pub fn validate_hierarchy(student: &ModelConfig, teachers: &[ModelConfig]) -> Result<Vec<String>> {
    let counts: Vec<usize> = std::iter::once(student)
        .chain(teachers)
        .map(count_params)
        .collect();
    let mut warnings = Vec::new();
    for (i, w) in counts.windows(2).enumerate() {
        let lower = if i == 0 {
            "student".to_string()
        } else {
            format!("teacher {i}")
        };
        let upper = format!("teacher {}", i + 1);
        if w[1] <= w[0] {
            return Err(EkdError::Hierarchy(format!(
                "{upper} has {} parameters, not more than {lower} with {}",
                w[1], w[0]
            )));
        }
        let ratio = w[1] as f64 / w[0] as f64;
        if !(2.0..=3.0).contains(&ratio) {
            let msg = format!("{upper}/{lower} parameter ratio {ratio:.2} is outside [2, 3]");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(warnings)
}

/// Learning-difficulty proxy `f(r) = 1 - r` with `r = (big - small) / big`.
/// Used only to rank teacher/student pairs.
pub fn delta_learn(n_big: usize, n_small: usize) -> Result<f64> {
    if n_small == 0 || n_big < n_small {
        return Err(EkdError::Contract(format!(
            "delta_learn needs n_big >= n_small > 0, got {n_big} and {n_small}"
        )));
    }
    let r = (n_big - n_small) as f64 / n_big as f64;
    Ok(1.0 - r)
}
