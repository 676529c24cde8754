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

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EkdError, Result};
use crate::text::{read_lines, write_lines};

pub const METRICS_HEADER: &str = "step,epoch,stage,lr,task_loss,kd_loss,valid_bleu";

/// One optimizer update. `valid_bleu` is filled on the last update of each
/// epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub task_loss: f64,
    pub kd_loss: f64,
    pub valid_bleu: Option<f64>,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},",
            self.step, self.epoch, self.stage, self.lr, self.task_loss, self.kd_loss
        )
        .unwrap();
        if let Some(b) = self.valid_bleu {
            write!(s, "{b}").unwrap();
        }
        s
    }

    fn from_csv(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| EkdError::Format(format!("metrics line {lineno}: bad {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("field count"));
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad("step"))?,
            epoch: f[1].parse().map_err(|_| bad("epoch"))?,
            stage: f[2].to_string(),
            lr: f[3].parse().map_err(|_| bad("lr"))?,
            task_loss: f[4].parse().map_err(|_| bad("task_loss"))?,
            kd_loss: f[5].parse().map_err(|_| bad("kd_loss"))?,
            valid_bleu: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|_| bad("valid_bleu"))?)
            },
        })
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let lines: Vec<String> = std::iter::once(METRICS_HEADER.to_string())
        .chain(rows.iter().map(MetricRow::to_csv))
        .collect();
    write_lines(path, &lines)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let lines = read_lines(path)?;
    match lines.first() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(EkdError::Format(format!(
                "{}: missing metrics header",
                path.display()
            )))
        }
    }
    lines
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, l)| MetricRow::from_csv(l, i + 1))
        .collect()
}
