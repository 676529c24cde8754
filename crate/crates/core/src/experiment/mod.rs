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

//! Experiment configuration, plans, execution and reports.

pub mod config;
pub mod data;
pub mod plan;
pub mod report;
pub mod runner;

pub use config::{DecodeSettings, Settings, SEED_ENV};
pub use data::{learn_shared, make_data, DataPaths, PreparedData, SyntheticSpec};
pub use plan::{delta_learn, validate_hierarchy, DistillPlan, PlanMode, StageSpec};
pub use report::{
    compare_knowledge, ExperimentReport, KnowledgeComparison, PairComparison, ScoreGroup,
    StageReport, Verdict, KNOWLEDGE_PROXY,
};
pub use runner::{
    score_corpus, translate, CacheMode, LoadedTeacher, RunOutcome, Runner, TrainSettings,
};
