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

use std::fs;
use std::path::Path;

use crate::error::{EkdError, Result};

/// Sentence-aligned source/target text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(EkdError::Data(format!(
                "source has {} lines but target has {}",
                src.len(),
                tgt.len()
            )));
        }
        Ok(Self { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Split off `[start, start+n)` as a new corpus.
    pub fn slice(&self, start: usize, n: usize) -> Self {
        Self {
            src: self.src[start..start + n].to_vec(),
            tgt: self.tgt[start..start + n].to_vec(),
        }
    }
}

/// UTF-8 file, one entry per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| EkdError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| EkdError::io(parent, e))?;
        }
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| EkdError::io(path, e))
}

pub fn read_parallel(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    ParallelCorpus::new(read_lines(src)?, read_lines(tgt)?)
}

pub fn write_parallel(corpus: &ParallelCorpus, src: &Path, tgt: &Path) -> Result<()> {
    write_lines(src, &corpus.src)?;
    write_lines(tgt, &corpus.tgt)
}
