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

//! Training objectives built on the autograd tape.
//!
//! All losses are averages over non-pad target positions, in nats per token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};
use crate::tensor::{log_softmax_in_place, Graph, Scalar, Tensor, Var};

/// How the task and distillation losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// `w * kd + (1 - w) * task`
    #[default]
    Convex,
    /// `task + w * kd`
    Additive,
}

impl FromStr for Formulation {
    type Err = EkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(Self::Convex),
            "additive" => Ok(Self::Additive),
            other => Err(EkdError::Config(format!(
                "unknown formulation {other:?}, expected convex or additive"
            ))),
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Convex => "convex",
            Self::Additive => "additive",
        })
    }
}

impl Formulation {
    pub fn mix(self, task: f64, kd: f64, weight: f64) -> f64 {
        match self {
            Self::Convex => weight * kd + (1.0 - weight) * task,
            Self::Additive => task + weight * kd,
        }
    }

    fn check_weight(self, weight: f64) -> Result<()> {
        let ok = match self {
            Self::Convex => (0.0..=1.0).contains(&weight),
            Self::Additive => weight >= 0.0 && weight.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(EkdError::Contract(format!(
                "mix weight {weight} invalid for {self} mixing"
            )))
        }
    }
}

/// Scalar summary of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub kd_loss: f64,
    pub mixed: f64,
    pub mix_weight: f64,
    pub token_count: usize,
}

fn count_tokens(targets: &[usize], pad_id: usize) -> Result<usize> {
    let n = targets.iter().filter(|&&t| t != pad_id).count();
    if n == 0 {
        return Err(EkdError::Data("batch has no non-pad target tokens".into()));
    }
    Ok(n)
}

fn check_rows<F: Scalar>(g: &Graph<F>, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(EkdError::Shape(format!(
            "logits {:?} do not match {} targets",
            shape,
            targets.len()
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Smoothed target distributions, already divided by the token count and
/// zeroed on pad rows. The pad class never receives smoothing mass.
fn smoothed_targets<F: Scalar>(
    rows: usize,
    classes: usize,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
    n: usize,
) -> Result<Tensor<F>> {
    let real_classes = if pad_id < classes {
        classes - 1
    } else {
        classes
    };
    let off = if real_classes > 1 {
        epsilon / (real_classes - 1) as f64
    } else {
        0.0
    };
    let on = if real_classes > 1 { 1.0 - epsilon } else { 1.0 };
    let inv = 1.0 / n as f64;
    let mut q = vec![F::zero(); rows * classes];
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        if t >= classes {
            return Err(EkdError::Vocab(format!(
                "target id {t} outside {classes} classes"
            )));
        }
        let row = &mut q[r * classes..(r + 1) * classes];
        for (k, x) in row.iter_mut().enumerate() {
            let mass = if k == t {
                on
            } else if k == pad_id {
                0.0
            } else {
                off
            };
            *x = F::from_f64_lossy(mass * inv);
        }
    }
    Tensor::new(vec![rows, classes], q)
}

fn task_from_log_probs<F: Scalar>(
    g: &mut Graph<F>,
    log_probs: Var,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(EkdError::Contract(format!(
            "label smoothing {epsilon} outside [0, 1)"
        )));
    }
    let (rows, classes) = check_rows(g, log_probs, targets)?;
    let n = count_tokens(targets, pad_id)?;
    let q = g.constant(smoothed_targets(
        rows, classes, targets, epsilon, pad_id, n,
    )?);
    let weighted = g.mul(q, log_probs)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

fn kd_from_log_probs<F: Scalar>(
    g: &mut Graph<F>,
    log_probs: Var,
    teacher_logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<Var> {
    if g.requires_grad(teacher_logits) {
        return Err(EkdError::Contract(
            "teacher logits must not require gradients".into(),
        ));
    }
    if g.shape(teacher_logits) != g.shape(log_probs) {
        return Err(EkdError::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            g.shape(teacher_logits),
            g.shape(log_probs)
        )));
    }
    let (rows, classes) = check_rows(g, log_probs, targets)?;
    let n = count_tokens(targets, pad_id)?;
    let inv = 1.0 / n as f64;
    let teacher = g.value(teacher_logits).to_f64_vec();
    let mut weights = vec![F::zero(); rows * classes];
    let mut entropy_term = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let mut lp = teacher[r * classes..(r + 1) * classes].to_vec();
        log_softmax_in_place(&mut lp);
        for (k, &l) in lp.iter().enumerate() {
            let p = l.exp();
            if p > 0.0 {
                entropy_term += p * l * inv;
            }
            weights[r * classes + k] = F::from_f64_lossy(p * inv);
        }
    }
    let w = g.constant(Tensor::new(vec![rows, classes], weights)?);
    let cross = g.mul(w, log_probs)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0);
    g.add_scalar(neg, entropy_term)
}

/// Label-smoothed cross-entropy: the target class gets `1 - epsilon` and the
/// remaining non-pad classes share `epsilon` evenly.
pub fn label_smoothed_ce<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<Var> {
    check_rows(g, logits, targets)?;
    let lp = g.log_softmax_rows(logits)?;
    task_from_log_probs(g, lp, targets, epsilon, pad_id)
}

/// Mean per-token `KL(teacher || student)`. The teacher logits must be a
/// constant on the tape.
pub fn kd_soft_label_loss<F: Scalar>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<Var> {
    check_rows(g, student_logits, targets)?;
    let lp = g.log_softmax_rows(student_logits)?;
    kd_from_log_probs(g, lp, teacher_logits, targets, pad_id)
}

/// Options shared by every stage objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub mix_weight: f64,
    pub formulation: Formulation,
    pub epsilon: f64,
    pub pad_id: usize,
}

/// Task loss, optional distillation loss and their mixture. Without a
/// teacher the objective is the task loss alone and the reported weight is 0.
pub fn stage_objective<F: Scalar>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logits: Option<Var>,
    targets: &[usize],
    spec: &ObjectiveSpec,
) -> Result<(Var, LossBreakdown)> {
    check_rows(g, student_logits, targets)?;
    let token_count = count_tokens(targets, spec.pad_id)?;
    let lp = g.log_softmax_rows(student_logits)?;
    let task = task_from_log_probs(g, lp, targets, spec.epsilon, spec.pad_id)?;
    let task_loss = g.value(task).item()?.to_f64_lossy();
    let Some(teacher) = teacher_logits else {
        let breakdown = LossBreakdown {
            task_loss,
            kd_loss: 0.0,
            mixed: task_loss,
            mix_weight: 0.0,
            token_count,
        };
        return Ok((task, breakdown));
    };
    spec.formulation.check_weight(spec.mix_weight)?;
    let kd = kd_from_log_probs(g, lp, teacher, targets, spec.pad_id)?;
    let kd_loss = g.value(kd).item()?.to_f64_lossy();
    let w = spec.mix_weight;
    let mixed = match spec.formulation {
        Formulation::Convex if w == 0.0 => task,
        Formulation::Convex if w == 1.0 => kd,
        Formulation::Convex => {
            let a = g.scale(kd, w);
            let b = g.scale(task, 1.0 - w);
            g.add(a, b)?
        }
        Formulation::Additive => {
            let a = g.scale(kd, w);
            g.add(task, a)?
        }
    };
    let breakdown = LossBreakdown {
        task_loss,
        kd_loss,
        mixed: g.value(mixed).item()?.to_f64_lossy(),
        mix_weight: w,
        token_count,
    };
    Ok((mixed, breakdown))
}
