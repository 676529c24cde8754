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

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};

use super::config::{DecodeSettings, Settings};
use super::data::PreparedData;
use super::plan::{validate_hierarchy, DistillPlan, PlanMode, StageSpec};
use super::report::{ExperimentReport, StageReport};
use crate::decode::{beam_batch, bleu, distill_flops, gap_report};
use crate::error::{EkdError, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::train::{
    derive_seed, train_stage, write_metrics, AdamConfig, Checkpoint, CheckpointMeta, OptimState,
    StageConfig, StageProgress, Teacher, TeacherCache, TrainData,
};

const ASSISTANT_SEED_STREAM: u64 = 11;

/// When to precompute teacher logits for the whole training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    /// Cache when it fits in the configured limit.
    Auto,
    Always,
    Never,
}

impl FromStr for CacheMode {
    type Err = EkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "always" => Ok(Self::Always),
            "never" => Ok(Self::Never),
            other => Err(EkdError::Config(format!("unknown teacher_cache {other:?}"))),
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Always => "always",
            Self::Never => "never",
        })
    }
}

/// `[train]` options shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub label_smoothing: f64,
    pub max_tokens: usize,
    pub teacher_cache: CacheMode,
    pub cache_limit_mb: usize,
}

impl TrainSettings {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let t = Self {
            label_smoothing: s.get_or("train", "label_smoothing", 0.1)?,
            max_tokens: s.get_or("train", "max_tokens", 4096)?,
            teacher_cache: s.get_or("train", "teacher_cache", CacheMode::Auto)?,
            cache_limit_mb: s.get_or("train", "cache_limit_mb", 1024)?,
        };
        if !(0.0..1.0).contains(&t.label_smoothing) || t.max_tokens == 0 {
            return Err(EkdError::Config(format!("invalid [train] settings {t:?}")));
        }
        Ok(t)
    }
}

/// A loaded, frozen teacher.
#[derive(Debug)]
pub struct LoadedTeacher {
    pub label: String,
    pub model: TransformerModel<f32>,
    pub vocab_hash: String,
    pub cache: Option<TeacherCache>,
}

/// Result of running a plan: the report plus the final student.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub model: TransformerModel<f32>,
}

/// Executes plans against one prepared dataset. Loaded teachers, their
/// logit caches and test scores are kept, so several seeds or baselines
/// run by the same runner pay for them once.
pub struct Runner<'a> {
    data: &'a PreparedData,
    train: TrainSettings,
    adam: AdamConfig,
    decode: DecodeSettings,
    teachers: HashMap<PathBuf, Rc<LoadedTeacher>>,
    test_scores: HashMap<String, f64>,
}

impl<'a> Runner<'a> {
    pub fn new(
        data: &'a PreparedData,
        train: TrainSettings,
        adam: AdamConfig,
        decode: DecodeSettings,
    ) -> Self {
        Self {
            data,
            train,
            adam,
            decode,
            teachers: HashMap::new(),
            test_scores: HashMap::new(),
        }
    }

    pub fn from_settings(data: &'a PreparedData, s: &Settings) -> Result<Self> {
        Ok(Self::new(
            data,
            TrainSettings::from_settings(s)?,
            s.adam_config()?,
            s.decode_settings()?,
        ))
    }

    /// Test-set BLEU with beam search, memoized by parameter fingerprint.
    pub fn test_bleu(&mut self, model: &TransformerModel<f32>) -> Result<f64> {
        let key = model.fingerprint();
        if let Some(&b) = self.test_scores.get(&key) {
            return Ok(b);
        }
        let b = score_corpus(
            model,
            &self.data.test_src,
            &self.data.test_refs,
            self.data,
            &self.decode,
        )?;
        self.test_scores.insert(key, b);
        Ok(b)
    }

    /// Load a teacher checkpoint once and check it against the shared vocabulary.
    pub fn teacher(&mut self, path: &Path) -> Result<Rc<LoadedTeacher>> {
        if let Some(t) = self.teachers.get(path) {
            return Ok(Rc::clone(t));
        }
        let ckpt = Checkpoint::load(path)?;
        let hash = self.data.vocab.hash();
        if ckpt.meta.vocab_hash != hash || ckpt.model.config().vocab_size != self.data.vocab.len() {
            return Err(EkdError::Contract(format!(
                "{} was trained with vocabulary {}, this experiment uses {hash}",
                path.display(),
                ckpt.meta.vocab_hash
            )));
        }
        let cache = self.build_cache(&ckpt.model)?;
        let t = Rc::new(LoadedTeacher {
            label: path.display().to_string(),
            model: ckpt.model,
            vocab_hash: ckpt.meta.vocab_hash,
            cache,
        });
        self.teachers.insert(path.to_path_buf(), Rc::clone(&t));
        Ok(t)
    }

    fn build_cache(&self, model: &TransformerModel<f32>) -> Result<Option<TeacherCache>> {
        let bytes = TeacherCache::bytes_needed(&self.data.train, model.config().vocab_size);
        let wanted = match self.train.teacher_cache {
            CacheMode::Always => true,
            CacheMode::Never => false,
            CacheMode::Auto => bytes <= self.train.cache_limit_mb << 20,
        };
        if !wanted {
            return Ok(None);
        }
        let started = Instant::now();
        let cache = TeacherCache::build(model, &self.data.train, self.train.max_tokens)?;
        info!(
            "cached teacher logits ({} MiB) in {:.1?}",
            bytes >> 20,
            started.elapsed()
        );
        Ok(Some(cache))
    }

    /// Run `plan`, writing checkpoints, metric CSVs and `report.ini` under `out_dir`.
    ///
    /// Every teacher is loaded and the hierarchy checked before any
    /// training. Each stage starts from the previous stage's best
    /// checkpoint.
    pub fn run_plan(&mut self, plan: &DistillPlan, out_dir: &Path) -> Result<RunOutcome> {
        plan.check_shape()?;
        std::fs::create_dir_all(out_dir).map_err(|e| EkdError::io(out_dir, e))?;
        let vocab_size = self.data.vocab.len();
        if plan.student.vocab_size != vocab_size {
            return Err(EkdError::Contract(format!(
                "student vocabulary size {} does not match the shared vocabulary ({vocab_size})",
                plan.student.vocab_size
            )));
        }
        let started = Instant::now();
        let outcome = match plan.mode {
            PlanMode::Takd => self.run_assistant_plan(plan, out_dir)?,
            _ => self.run_chain(plan, out_dir)?,
        };
        outcome.report.save(&out_dir.join("report.ini"))?;
        info!(
            "{}: final test BLEU {:.2} in {:.1?}",
            plan.name,
            outcome.report.final_test_bleu,
            started.elapsed()
        );
        Ok(outcome)
    }

    /// Run a baseline pipeline over the plan's student and stages.
    pub fn run_baseline(
        &mut self,
        kind: PlanMode,
        plan: &DistillPlan,
        out_dir: &Path,
    ) -> Result<RunOutcome> {
        if !matches!(kind, PlanMode::SingleTeacher | PlanMode::Takd) {
            return Err(EkdError::Config(format!("{kind} is not a baseline")));
        }
        let mut p = plan.clone();
        p.mode = kind;
        self.run_plan(&p, out_dir)
    }

    fn run_chain(&mut self, plan: &DistillPlan, out_dir: &Path) -> Result<RunOutcome> {
        let teachers = plan
            .stages
            .iter()
            .map(|s| s.teacher.as_deref().map(|p| self.teacher(p)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let configs: Vec<ModelConfig> = teachers
            .iter()
            .flatten()
            .map(|t| t.model.config().clone())
            .collect();
        validate_hierarchy(&plan.student, &configs)?;

        let mut student = TransformerModel::build(plan.student.clone(), plan.student_seed)?;
        let mut optim = OptimState::new(self.adam);
        let mut stages = Vec::new();
        for (spec, teacher) in plan.stages.iter().zip(&teachers) {
            if !plan.carry_optimizer {
                optim = OptimState::new(self.adam);
            }
            let teacher = teacher.as_ref().map(|t| (t.as_ref(), None));
            stages.push(self.run_stage(&mut student, &mut optim, teacher, spec, out_dir)?);
        }
        self.finish(plan, student, stages, out_dir)
    }

    fn run_assistant_plan(&mut self, plan: &DistillPlan, out_dir: &Path) -> Result<RunOutcome> {
        let senior_path = plan.stages[0]
            .teacher
            .as_deref()
            .expect("checked by check_shape");
        let senior = self.teacher(senior_path)?;
        let ta_cfg = plan.assistant.clone().expect("checked by check_shape");
        validate_hierarchy(
            &plan.student,
            &[ta_cfg.clone(), senior.model.config().clone()],
        )?;

        let mut ta = TransformerModel::build(
            ta_cfg,
            derive_seed(plan.student_seed, ASSISTANT_SEED_STREAM, 0),
        )?;
        let mut optim = OptimState::new(self.adam);
        let first = self.run_stage(
            &mut ta,
            &mut optim,
            Some((&senior, None)),
            &plan.stages[0],
            out_dir,
        )?;

        let assistant = LoadedTeacher {
            label: "assistant".into(),
            cache: self.build_cache(&ta)?,
            model: ta,
            vocab_hash: self.data.vocab.hash(),
        };
        let mut student = TransformerModel::build(plan.student.clone(), plan.student_seed)?;
        let mut optim = OptimState::new(self.adam);
        let second = self.run_stage(
            &mut student,
            &mut optim,
            Some((&assistant, Some(first.test_bleu))),
            &plan.stages[1],
            out_dir,
        )?;
        self.finish(plan, student, vec![first, second], out_dir)
    }

    fn finish(
        &mut self,
        plan: &DistillPlan,
        student: TransformerModel<f32>,
        stages: Vec<StageReport>,
        out_dir: &Path,
    ) -> Result<RunOutcome> {
        let report = ExperimentReport::new(
            &plan.name,
            plan.student_seed,
            student.param_count(),
            &self.data.vocab.hash(),
            &self.data.test_hash,
            stages,
        )?;
        let final_ckpt = Checkpoint {
            meta: self.meta(
                &student,
                "final",
                plan.student_seed,
                &OptimState::new(self.adam),
                &StageProgress::default(),
            ),
            model: student,
            optim: OptimState::new(self.adam),
        };
        final_ckpt.save(&out_dir.join("final.ckpt"))?;
        Ok(RunOutcome {
            report,
            model: final_ckpt.model,
        })
    }

    fn meta(
        &self,
        model: &TransformerModel<f32>,
        stage: &str,
        seed: u64,
        optim: &OptimState<f32>,
        progress: &StageProgress,
    ) -> CheckpointMeta {
        CheckpointMeta {
            config: model.config().clone(),
            vocab_hash: self.data.vocab.hash(),
            stage: stage.to_string(),
            seed,
            optimizer_step: optim.step,
            stage_step: progress.stage_step,
            best_epoch: progress.best.as_ref().map(|b| b.epoch),
            best_bleu: progress.best.as_ref().map(|b| b.bleu),
            optimizer: optim.hyper,
        }
    }

    /// Train one stage, then replace `student` with its best epoch.
    /// `teacher` carries an already known test score for teachers that are
    /// not memoized (the assistant).
    fn run_stage(
        &mut self,
        student: &mut TransformerModel<f32>,
        optim: &mut OptimState<f32>,
        teacher: Option<(&LoadedTeacher, Option<f64>)>,
        spec: &StageSpec,
        out_dir: &Path,
    ) -> Result<StageReport> {
        let data = self.data;
        let cfg = StageConfig {
            label: spec.label.clone(),
            mix_weight: spec.mix_weight,
            formulation: spec.formulation,
            epochs: spec.epochs,
            seed: spec.seed,
            dropout: student.config().dropout,
            label_smoothing: self.train.label_smoothing,
            max_tokens: self.train.max_tokens,
            max_steps: None,
            valid_max_len: self.decode.max_len,
            bleu_smoothing: self.decode.bleu_smoothing,
        };
        let train_data = TrainData {
            train: &data.train,
            valid_src: &data.valid_src,
            valid_refs: &data.valid_refs,
            vocab: &data.vocab,
            bpe: &data.bpe,
        };
        let frozen = teacher.map(|(t, _)| Teacher {
            model: &t.model,
            vocab_hash: &t.vocab_hash,
            cache: t.cache.as_ref(),
        });
        let started = Instant::now();
        let outcome = train_stage(
            student,
            optim,
            frozen,
            &train_data,
            &cfg,
            StageProgress::default(),
        )?;
        write_metrics(
            &out_dir.join(format!("{}.metrics.csv", spec.label)),
            &outcome.log,
        )?;
        let progress = outcome.progress;
        if let Some(best) = &progress.best {
            *student = best.model.clone();
        }
        Checkpoint {
            meta: self.meta(student, &spec.label, spec.seed, optim, &progress),
            model: student.clone(),
            optim: optim.clone(),
        }
        .save(&out_dir.join(format!("{}.best.ckpt", spec.label)))?;

        let test_bleu = self.test_bleu(student)?;
        let teacher_bleu = match teacher {
            Some((_, Some(b))) => Some(b),
            Some((t, None)) => Some(self.test_bleu(&t.model)?),
            None => None,
        };
        let gap = match teacher_bleu {
            Some(tb) if tb > 0.0 => Some(gap_report(test_bleu, tb)?),
            Some(_) => {
                warn!("{}: teacher scores 0 BLEU, gap left undefined", spec.label);
                None
            }
            None => None,
        };
        let tokens =
            spec.epochs as u64 * data.train.iter().map(|p| p.tgt.len() as u64).sum::<u64>();
        let teacher_cfg = teacher.map(|(t, _)| t.model.config());
        info!(
            "{}: best valid BLEU {:.2}, test BLEU {test_bleu:.2} in {:.1?}",
            spec.label,
            progress.best.as_ref().map_or(0.0, |b| b.bleu),
            started.elapsed()
        );
        Ok(StageReport {
            label: spec.label.clone(),
            teacher: teacher.map(|(t, _)| t.label.clone()),
            teacher_params: teacher.map(|(t, _)| t.model.param_count()),
            teacher_test_bleu: teacher_bleu,
            model_params: student.param_count(),
            epochs: spec.epochs,
            best_epoch: progress.best.as_ref().map(|b| b.epoch),
            best_valid_bleu: progress.best.as_ref().map(|b| b.bleu),
            test_bleu,
            gap,
            train_tokens: tokens,
            train_flops: distill_flops(student.config(), teacher_cfg, tokens),
        })
    }
}

/// Beam-decode `sources` and score the detokenized output against `refs`.
pub fn score_corpus(
    model: &TransformerModel<f32>,
    sources: &[Vec<u32>],
    refs: &[String],
    data: &PreparedData,
    decode: &DecodeSettings,
) -> Result<f64> {
    let hyps = translate(model, sources, data, decode)?;
    bleu(&hyps, refs, decode.bleu_smoothing)
}

/// Beam-decode and detokenize.
pub fn translate(
    model: &TransformerModel<f32>,
    sources: &[Vec<u32>],
    data: &PreparedData,
    decode: &DecodeSettings,
) -> Result<Vec<String>> {
    let hyps = beam_batch(
        model,
        sources,
        decode.beam,
        decode.max_len,
        decode.length_penalty,
    )?;
    Ok(hyps.iter().map(|h| data.detok(&h.tokens)).collect())
}
