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

use std::collections::BTreeMap;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cache::TeacherCache;
use super::derive_seed;
use super::metrics::MetricRow;
use super::optim::{adam_step, clip_grad_norm, OptimState};
use crate::decode::{bleu, greedy_batch, MaxLen, Smoothing};
use crate::error::{EkdError, Result};
use crate::losses::{stage_objective, Formulation, ObjectiveSpec};
use crate::model::{Mode, TransformerModel};
use crate::tensor::{Graph, Tensor};
use crate::text::{batch_by_tokens, BpeTable, EncodedPair, Vocabulary, PAD};

const BATCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Settings for one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub label: String,
    pub mix_weight: f64,
    pub formulation: Formulation,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_tokens: usize,
    /// Stop once the stage has taken this many updates (for checkpointing).
    pub max_steps: Option<u64>,
    pub valid_max_len: MaxLen,
    pub bleu_smoothing: Smoothing,
}

impl StageConfig {
    pub fn new(label: &str, epochs: usize, seed: u64) -> Self {
        Self {
            label: label.to_string(),
            mix_weight: 0.5,
            formulation: Formulation::Convex,
            epochs,
            seed,
            dropout: 0.3,
            label_smoothing: 0.1,
            max_tokens: 4096,
            max_steps: None,
            valid_max_len: MaxLen { a: 1.5, b: 10 },
            bleu_smoothing: Smoothing::Exp,
        }
    }
}

/// Training and validation data, already encoded with the shared vocabulary.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [EncodedPair],
    pub valid_src: &'a [Vec<u32>],
    /// Detokenized validation references.
    pub valid_refs: &'a [String],
    pub vocab: &'a Vocabulary,
    pub bpe: &'a BpeTable,
}

/// A frozen teacher and the vocabulary it was trained with.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a TransformerModel<f32>,
    pub vocab_hash: &'a str,
    pub cache: Option<&'a TeacherCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestEpoch {
    pub epoch: usize,
    pub bleu: f64,
    pub model: TransformerModel<f32>,
}

/// Where a stage stands; pass the previous value back in to resume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageProgress {
    pub stage_step: u64,
    pub best: Option<BestEpoch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub log: Vec<MetricRow>,
    pub progress: StageProgress,
    /// `false` when `max_steps` cut the stage short.
    pub completed: bool,
}

/// Greedy-decode `sources` and score against `refs`.
pub fn validation_bleu(
    model: &TransformerModel<f32>,
    sources: &[Vec<u32>],
    refs: &[String],
    vocab: &Vocabulary,
    bpe: &BpeTable,
    max_len: MaxLen,
    smoothing: Smoothing,
) -> Result<f64> {
    let hyps = greedy_batch(model, sources, max_len)?;
    let text: Vec<String> = hyps.iter().map(|h| vocab.decode(&h.tokens, bpe)).collect();
    bleu(&text, refs, smoothing)
}

fn check_inputs(
    student: &TransformerModel<f32>,
    teacher: Option<&Teacher<'_>>,
    data: &TrainData<'_>,
) -> Result<()> {
    if data.train.is_empty() {
        return Err(EkdError::Data("no training pairs".into()));
    }
    if data.valid_src.len() != data.valid_refs.len() {
        return Err(EkdError::Data(
            "validation sources and references differ in length".into(),
        ));
    }
    let vs = data.vocab.len();
    if student.config().vocab_size != vs {
        return Err(EkdError::Contract(format!(
            "student vocabulary size {} does not match the shared vocabulary ({vs})",
            student.config().vocab_size
        )));
    }
    if let Some(t) = teacher {
        let hash = data.vocab.hash();
        if t.vocab_hash != hash || t.model.config().vocab_size != vs {
            return Err(EkdError::Contract(format!(
                "teacher vocabulary {} does not match the student's {hash}",
                t.vocab_hash
            )));
        }
        if let Some(c) = t.cache {
            if c.len() != data.train.len() || c.fingerprint() != t.model.fingerprint() {
                return Err(EkdError::Contract(
                    "teacher cache was built for another teacher or dataset".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Train `student` for one stage, optionally distilling from a frozen teacher.
///
/// Every update draws its batch order from `(seed, epoch)` and its dropout
/// masks from `(seed, stage step)`, so a run resumed from `progress` takes
/// exactly the updates an uninterrupted run would. Validation BLEU is
/// computed after each epoch; the best epoch (earliest on ties) is kept.
pub fn train_stage(
    student: &mut TransformerModel<f32>,
    optim: &mut OptimState<f32>,
    teacher: Option<Teacher<'_>>,
    data: &TrainData<'_>,
    cfg: &StageConfig,
    progress: StageProgress,
) -> Result<StageOutcome> {
    let mut progress = progress;
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(StageOutcome {
            log,
            progress,
            completed: true,
        });
    }
    check_inputs(student, teacher.as_ref(), data)?;
    let spec = ObjectiveSpec {
        mix_weight: cfg.mix_weight,
        formulation: cfg.formulation,
        epsilon: cfg.label_smoothing,
        pad_id: PAD as usize,
    };
    let v = student.config().vocab_size;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let batches = batch_by_tokens(
            data.train,
            cfg.max_tokens,
            derive_seed(cfg.seed, BATCH_STREAM, epoch as u64),
        )?;
        let mut ran = false;
        for batch in &batches {
            if step < progress.stage_step {
                step += 1;
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                return Ok(StageOutcome {
                    log,
                    progress,
                    completed: false,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DROPOUT_STREAM, step));
            let mut g = Graph::new();
            let p = student.bind(&mut g, true);
            let mut mode = Mode::Train {
                rng: &mut rng,
                dropout: cfg.dropout,
            };
            let logits = student.forward_batch(&mut g, &p, &batch.src, &batch.tgt_in, &mut mode)?;
            let teacher_var = match &teacher {
                None => None,
                Some(t) => {
                    let rows = batch.len() * batch.tgt_in.len;
                    let values = match t.cache {
                        Some(c) => {
                            Tensor::new(vec![rows, v], c.gather(&batch.indices, batch.tgt_in.len)?)?
                        }
                        None => {
                            let mut tg = Graph::no_grad();
                            let tp = t.model.bind(&mut tg, false);
                            let out = t.model.forward_batch(
                                &mut tg,
                                &tp,
                                &batch.src,
                                &batch.tgt_in,
                                &mut Mode::Eval,
                            )?;
                            tg.value(out).clone()
                        }
                    };
                    Some(g.constant(values))
                }
            };
            let (loss, breakdown) =
                stage_objective(&mut g, logits, teacher_var, &batch.tgt_out.ids, &spec)?;
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, var) in p.iter() {
                let grad = g
                    .take_grad(var)
                    .unwrap_or_else(|| Tensor::zeros(student.params()[name].shape().to_vec()));
                grads.insert(name.to_string(), grad);
            }
            drop(g);
            if let Some(c) = optim.hyper.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            let lr = adam_step(student.params_mut(), &grads, optim)?;
            step += 1;
            progress.stage_step = step;
            ran = true;
            debug!(
                "{} step {} epoch {epoch}: task {:.4} kd {:.4}",
                cfg.label, optim.step, breakdown.task_loss, breakdown.kd_loss
            );
            log.push(MetricRow {
                step: optim.step,
                epoch,
                stage: cfg.label.clone(),
                lr,
                task_loss: breakdown.task_loss,
                kd_loss: breakdown.kd_loss,
                valid_bleu: None,
            });
        }
        if !ran {
            continue;
        }
        let score = if data.valid_src.is_empty() {
            0.0
        } else {
            validation_bleu(
                student,
                data.valid_src,
                data.valid_refs,
                data.vocab,
                data.bpe,
                cfg.valid_max_len,
                cfg.bleu_smoothing,
            )?
        };
        if let Some(last) = log.last_mut() {
            last.valid_bleu = Some(score);
        }
        info!("{} epoch {epoch}: valid BLEU {score:.2}", cfg.label);
        if progress.best.as_ref().is_none_or(|b| score > b.bleu) {
            progress.best = Some(BestEpoch {
                epoch,
                bleu: score,
                model: student.clone(),
            });
        }
    }
    Ok(StageOutcome {
        log,
        progress,
        completed: true,
    })
}
