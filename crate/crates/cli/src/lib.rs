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

//! Command-line driver. Every subcommand reads an INI configuration file,
//! applies `--set section.key=value` overrides and the seed environment
//! variable, and logs the resolved configuration before doing any work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use ekd_core::decode::{distill_flops, flops_estimate, FlopsMode};
use ekd_core::experiment::{
    compare_knowledge, make_data, translate, DataPaths, DistillPlan, ExperimentReport,
    PreparedData, Runner, Settings, SyntheticSpec,
};
use ekd_core::text::{read_lines, write_lines, Vocabulary};
use ekd_core::train::Checkpoint;
use ekd_core::{EkdError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "ekd",
    version,
    about = "Multi-stage knowledge distillation for small translation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override one setting, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, BPE codes and vocabulary.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the `[model]` configuration from scratch (used for teachers).
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (default `[experiment] out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the distillation plan described by `[experiment]` and `[stage.N]`.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report test BLEU of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Translate a file of source sentences (default: the test sources).
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write translations here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Estimate training compute for the `[model]` configuration.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Target tokens processed.
        #[arg(long)]
        tokens: u64,
        #[arg(long, default_value = "forward")]
        mode: FlopsMode,
        /// Config section of a teacher whose forward passes are added.
        #[arg(long)]
        teacher: Option<String>,
    },
    /// Compare groups of reports listed under `[report.groups]`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Run the command line `argv` (program name first) and return the exit
/// status: 0 on success, 1 on a failed run, 2 on a usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::load(&common.config)?;
    s.apply_env()?;
    for o in &common.overrides {
        s.apply_override(o)?;
    }
    info!(
        "resolved configuration from {}:\n{}",
        common.config.display(),
        s.to_text()
    );
    Ok(s)
}

fn out_dir(s: &Settings, flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.or_else(|| s.path("experiment", "out_dir"))
        .unwrap_or_else(|| s.base_dir().join("runs").join(name))
}

fn write_resolved(s: &Settings, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EkdError::io(dir, e))?;
    let path = dir.join("config.resolved.ini");
    fs::write(&path, s.to_text()).map_err(|e| EkdError::io(&path, e))
}

fn load_model(s: &Settings, path: &Path) -> Result<(PreparedData, Checkpoint)> {
    let data = PreparedData::load(&DataPaths::from_settings(s))?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.vocab_hash != data.vocab.hash() {
        return Err(EkdError::Contract(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    Ok((data, ckpt))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeData { common } => {
            let s = settings(&common)?;
            let vocab = make_data(
                &SyntheticSpec::from_settings(&s)?,
                &DataPaths::from_settings(&s),
            )?;
            println!("vocabulary: {} tokens, hash {}", vocab.len(), vocab.hash());
        }
        Command::Train { common, out } => {
            let s = settings(&common)?;
            let data = PreparedData::load(&DataPaths::from_settings(&s))?;
            let plan = DistillPlan::scratch(
                &s.get_or("experiment", "name", "teacher".to_string())?,
                s.model_config("model", data.vocab.len())?,
                s.get_or("experiment", "seed", 1)?,
                s.require("train", "epochs")?,
            );
            let dir = out_dir(&s, out, &plan.name);
            write_resolved(&s, &dir)?;
            let run = Runner::from_settings(&data, &s)?.run_plan(&plan, &dir)?;
            println!(
                "test BLEU {:.2}, checkpoint {}",
                run.report.final_test_bleu,
                dir.join("final.ckpt").display()
            );
        }
        Command::Distill { common, out } => {
            let s = settings(&common)?;
            let data = PreparedData::load(&DataPaths::from_settings(&s))?;
            let plan = DistillPlan::from_settings(&s, data.vocab.len())?;
            let dir = out_dir(&s, out, &plan.name);
            write_resolved(&s, &dir)?;
            let run = Runner::from_settings(&data, &s)?.run_plan(&plan, &dir)?;
            for st in &run.report.stages {
                println!(
                    "{}: test BLEU {:.2}, gap {}",
                    st.label,
                    st.test_bleu,
                    st.gap.map_or("n/a".into(), |g| format!(
                        "{:.2} ({:.2}%)",
                        g.abs_gap, g.pct_gap
                    ))
                );
            }
            println!("report {}", dir.join("report.ini").display());
        }
        Command::Evaluate { common, checkpoint } => {
            let s = settings(&common)?;
            let (data, ckpt) = load_model(&s, &checkpoint)?;
            let mut runner = Runner::from_settings(&data, &s)?;
            println!("test BLEU {:.2}", runner.test_bleu(&ckpt.model)?);
        }
        Command::Decode {
            common,
            checkpoint,
            input,
            output,
        } => {
            let s = settings(&common)?;
            let (data, ckpt) = load_model(&s, &checkpoint)?;
            let sources = match input {
                Some(p) => read_lines(&p)?
                    .iter()
                    .map(|l| data.vocab.encode(l, &data.bpe))
                    .collect(),
                None => data.test_src.clone(),
            };
            let hyps = translate(&ckpt.model, &sources, &data, &s.decode_settings()?)?;
            match output {
                Some(p) => write_lines(&p, &hyps)?,
                None => hyps.iter().for_each(|h| println!("{h}")),
            }
        }
        Command::Flops {
            common,
            tokens,
            mode,
            teacher,
        } => {
            let s = settings(&common)?;
            let vocab_size = match s.get("model", "vocab_size")? {
                Some(v) => v,
                None => Vocabulary::load(&DataPaths::from_settings(&s).vocab)?.len(),
            };
            let student = s.model_config("model", vocab_size)?;
            let flops = match teacher {
                Some(sec) => {
                    distill_flops(&student, Some(&s.model_config(&sec, vocab_size)?), tokens)
                }
                None => flops_estimate(&student, tokens, mode),
            };
            println!("{flops}");
        }
        Command::Report { common } => {
            let s = settings(&common)?;
            let mut groups = Vec::new();
            for label in s.keys("report.groups") {
                let mut reports = Vec::new();
                for p in s.require::<String>("report.groups", &label)?.split(',') {
                    reports.push(ExperimentReport::load(&s.base_dir().join(p.trim()))?);
                }
                groups.push((label, reports));
            }
            let index = |key: &str| -> Result<usize> {
                let want: String = s.require("report", key)?;
                groups.iter().position(|(l, _)| *l == want).ok_or_else(|| {
                    EkdError::Config(format!("[report] {key} names unknown group {want:?}"))
                })
            };
            let cmp = compare_knowledge(&groups, index("candidate")?, index("baseline")?)?;
            let text = cmp.to_text();
            print!("{text}");
            if let Some(p) = s.path("report", "output") {
                fs::write(&p, &text).map_err(|e| EkdError::io(&p, e))?;
            }
        }
    }
    Ok(())
}
