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
use std::fmt;
use std::path::Path;

use ini::{EscapePolicy, Ini, WriteOption};

use crate::decode::GapReport;
use crate::error::{EkdError, Result};

/// Metric used as the stand-in for transferred knowledge.
pub const KNOWLEDGE_PROXY: &str = "test_bleu";

/// One stage's results. In the assistant plan the first stage reports the
/// assistant rather than the student.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub label: String,
    pub teacher: Option<String>,
    pub teacher_params: Option<usize>,
    pub teacher_test_bleu: Option<f64>,
    pub model_params: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_bleu: Option<f64>,
    pub test_bleu: f64,
    pub gap: Option<GapReport>,
    pub train_tokens: u64,
    pub train_flops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub student_params: usize,
    pub vocab_hash: String,
    pub test_hash: String,
    pub stages: Vec<StageReport>,
    pub final_test_bleu: f64,
    pub total_epochs: usize,
    pub total_train_tokens: u64,
    pub total_train_flops: f64,
    /// Other reports this one should be read against, by label.
    pub baselines: BTreeMap<String, String>,
}

impl ExperimentReport {
    /// Assemble a report, deriving the totals and the final score from the stages.
    pub fn new(
        name: &str,
        seed: u64,
        student_params: usize,
        vocab_hash: &str,
        test_hash: &str,
        stages: Vec<StageReport>,
    ) -> Result<Self> {
        let last = stages
            .last()
            .ok_or_else(|| EkdError::Contract("a report needs at least one stage".into()))?;
        Ok(Self {
            name: name.to_string(),
            seed,
            student_params,
            vocab_hash: vocab_hash.to_string(),
            test_hash: test_hash.to_string(),
            final_test_bleu: last.test_bleu,
            total_epochs: stages.iter().map(|s| s.epochs).sum(),
            total_train_tokens: stages.iter().map(|s| s.train_tokens).sum(),
            total_train_flops: stages.iter().map(|s| s.train_flops).sum(),
            stages,
            baselines: BTreeMap::new(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut ini = Ini::new();
        ini.with_section(Some("summary"))
            .set("name", &self.name)
            .set("seed", self.seed.to_string())
            .set("student_params", self.student_params.to_string())
            .set("vocab_hash", &self.vocab_hash)
            .set("test_hash", &self.test_hash)
            .set("knowledge_proxy", KNOWLEDGE_PROXY)
            .set("final_test_bleu", self.final_test_bleu.to_string())
            .set("stages", self.stages.len().to_string())
            .set("total_epochs", self.total_epochs.to_string())
            .set("total_train_tokens", self.total_train_tokens.to_string())
            .set("total_train_flops", self.total_train_flops.to_string());
        for (k, s) in self.stages.iter().enumerate() {
            let mut sec = ini.with_section(Some(format!("stage.{}", k + 1)));
            sec.set("label", &s.label)
                .set("model_params", s.model_params.to_string())
                .set("epochs", s.epochs.to_string())
                .set("test_bleu", s.test_bleu.to_string())
                .set("train_tokens", s.train_tokens.to_string())
                .set("train_flops", s.train_flops.to_string());
            let optional = [
                ("teacher", s.teacher.clone()),
                ("teacher_params", s.teacher_params.map(|v| v.to_string())),
                (
                    "teacher_test_bleu",
                    s.teacher_test_bleu.map(|v| v.to_string()),
                ),
                ("best_epoch", s.best_epoch.map(|v| v.to_string())),
                ("best_valid_bleu", s.best_valid_bleu.map(|v| v.to_string())),
                ("gap_abs", s.gap.map(|g| g.abs_gap.to_string())),
                ("gap_pct", s.gap.map(|g| g.pct_gap.to_string())),
            ];
            for (key, value) in optional {
                if let Some(v) = value {
                    sec.set(key, v);
                }
            }
        }
        if !self.baselines.is_empty() {
            let mut sec = ini.with_section(Some("baselines"));
            for (k, v) in &self.baselines {
                sec.set(k, v);
            }
        }
        let mut out = Vec::new();
        let opt = WriteOption {
            escape_policy: EscapePolicy::Nothing,
            ..Default::default()
        };
        ini.write_to_opt(&mut out, opt).expect("writing to memory");
        String::from_utf8(out).expect("ini output is utf-8")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text)
            .map_err(|e| EkdError::Format(format!("report: {e}")))?;
        let summary = Fields::new(&ini, "summary")?;
        let n: usize = summary.req("stages")?;
        let mut stages = Vec::with_capacity(n);
        for k in 1..=n {
            let f = Fields::new(&ini, &format!("stage.{k}"))?;
            let teacher_test_bleu: Option<f64> = f.opt("teacher_test_bleu")?;
            let test_bleu: f64 = f.req("test_bleu")?;
            let gap = match (
                f.opt::<f64>("gap_abs")?,
                f.opt::<f64>("gap_pct")?,
                teacher_test_bleu,
            ) {
                (Some(abs_gap), Some(pct_gap), Some(teacher_metric)) => Some(GapReport {
                    student_metric: test_bleu,
                    teacher_metric,
                    abs_gap,
                    pct_gap,
                }),
                (None, None, _) => None,
                _ => {
                    return Err(EkdError::Format(format!(
                        "report stage.{k}: incomplete gap entry"
                    )))
                }
            };
            stages.push(StageReport {
                label: f.req("label")?,
                teacher: f.opt("teacher")?,
                teacher_params: f.opt("teacher_params")?,
                teacher_test_bleu,
                model_params: f.req("model_params")?,
                epochs: f.req("epochs")?,
                best_epoch: f.opt("best_epoch")?,
                best_valid_bleu: f.opt("best_valid_bleu")?,
                test_bleu,
                gap,
                train_tokens: f.req("train_tokens")?,
                train_flops: f.req("train_flops")?,
            });
        }
        let mut report = Self::new(
            &summary.req::<String>("name")?,
            summary.req("seed")?,
            summary.req("student_params")?,
            &summary.req::<String>("vocab_hash")?,
            &summary.req::<String>("test_hash")?,
            stages,
        )?;
        let stated = (
            summary.req::<f64>("final_test_bleu")?,
            summary.req::<usize>("total_epochs")?,
            summary.req::<u64>("total_train_tokens")?,
            summary.req::<f64>("total_train_flops")?,
        );
        let derived = (
            report.final_test_bleu,
            report.total_epochs,
            report.total_train_tokens,
            report.total_train_flops,
        );
        if stated != derived {
            return Err(EkdError::Integrity(
                "report totals do not match its stages".into(),
            ));
        }
        if let Some(sec) = ini.section(Some("baselines")) {
            report.baselines = sec
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| EkdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EkdError::io(path, e))?;
        Self::parse(&text)
    }
}

struct Fields<'a> {
    name: String,
    props: &'a ini::Properties,
}

impl<'a> Fields<'a> {
    fn new(ini: &'a Ini, name: &str) -> Result<Self> {
        let props = ini
            .section(Some(name))
            .ok_or_else(|| EkdError::Format(format!("report has no [{name}] section")))?;
        Ok(Self {
            name: name.to_string(),
            props,
        })
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.props
            .get(key)
            .map(|v| {
                v.parse().map_err(|_| {
                    EkdError::Format(format!("report [{}] {key}: cannot parse {v:?}", self.name))
                })
            })
            .transpose()
    }

    fn req<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| EkdError::Format(format!("report [{}] is missing {key}", self.name)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Holds,
    Tie,
    Fails,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Holds => "true",
            Self::Tie => "tie",
            Self::Fails => "false",
        })
    }
}

/// Per-seed scores of one pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGroup {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairComparison {
    pub first: String,
    pub second: String,
    /// `mean(first) - mean(second)`
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeComparison {
    pub groups: Vec<ScoreGroup>,
    pub pairs: Vec<PairComparison>,
    /// Whether the candidate's mean exceeds the baseline's.
    pub verdict: Verdict,
    pub margin: f64,
}

impl KnowledgeComparison {
    /// Compare two lists of scores directly.
    pub fn from_scores(candidate: &[f64], baseline: &[f64]) -> Result<Self> {
        let groups = vec![
            score_group("candidate", candidate.to_vec())?,
            score_group("baseline", baseline.to_vec())?,
        ];
        Ok(Self::from_groups(groups, 0, 1))
    }

    fn from_groups(groups: Vec<ScoreGroup>, candidate: usize, baseline: usize) -> Self {
        let mut pairs = Vec::new();
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                pairs.push(PairComparison {
                    first: groups[i].label.clone(),
                    second: groups[j].label.clone(),
                    margin: groups[i].mean - groups[j].mean,
                });
            }
        }
        let margin = groups[candidate].mean - groups[baseline].mean;
        let verdict = if margin.abs() <= 1e-9 {
            Verdict::Tie
        } else if margin > 0.0 {
            Verdict::Holds
        } else {
            Verdict::Fails
        };
        Self {
            groups,
            pairs,
            verdict,
            margin,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("knowledge proxy: {KNOWLEDGE_PROXY}\n");
        for g in &self.groups {
            let seeds: Vec<String> = g.per_seed.iter().map(|v| format!("{v:.2}")).collect();
            out += &format!(
                "{}: mean {:.2} over [{}]\n",
                g.label,
                g.mean,
                seeds.join(", ")
            );
        }
        for p in &self.pairs {
            out += &format!("{} - {} = {:+.2}\n", p.first, p.second, p.margin);
        }
        out += &format!("verdict: {} (margin {:+.2})\n", self.verdict, self.margin);
        out
    }
}

fn score_group(label: &str, per_seed: Vec<f64>) -> Result<ScoreGroup> {
    if per_seed.is_empty() {
        return Err(EkdError::Contract(format!("no scores for {label}")));
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(ScoreGroup {
        label: label.to_string(),
        per_seed,
        mean,
    })
}

/// Compare pipelines by mean final test BLEU over their seeds. `candidate`
/// and `baseline` index into `groups`; the verdict says whether the
/// candidate transferred more.
pub fn compare_knowledge(
    groups: &[(String, Vec<ExperimentReport>)],
    candidate: usize,
    baseline: usize,
) -> Result<KnowledgeComparison> {
    if candidate >= groups.len() || baseline >= groups.len() {
        return Err(EkdError::Contract("comparison index out of range".into()));
    }
    let first = groups
        .iter()
        .flat_map(|(_, r)| r.first())
        .next()
        .ok_or_else(|| EkdError::Contract("no reports to compare".into()))?;
    for (label, reports) in groups {
        for r in reports {
            if r.test_hash != first.test_hash || r.vocab_hash != first.vocab_hash {
                return Err(EkdError::Contract(format!(
                    "{label} report {:?} used a different test split or vocabulary",
                    r.name
                )));
            }
        }
    }
    let summaries = groups
        .iter()
        .map(|(label, reports)| {
            score_group(label, reports.iter().map(|r| r.final_test_bleu).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KnowledgeComparison::from_groups(
        summaries, candidate, baseline,
    ))
}
