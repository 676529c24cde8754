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
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimState};
use crate::error::{EkdError, Result};
use crate::model::{parameter_layout, ModelConfig, TransformerModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EKD1";
const VERSION: u8 = 1;
const MOMENT_PREFIXES: [&str; 2] = ["optim.m.", "optim.v."];

/// Everything besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub stage: String,
    pub seed: u64,
    pub optimizer_step: u64,
    /// Updates taken inside the current stage.
    pub stage_step: u64,
    pub best_epoch: Option<usize>,
    pub best_bleu: Option<f64>,
    pub optimizer: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: TransformerModel<f32>,
    pub optim: OptimState<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                EkdError::Integrity(format!(
                    "checkpoint truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| EkdError::Integrity(format!("{what} does not fit in memory")))
    }
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| EkdError::Format(format!("cannot encode checkpoint metadata: {e}")))?;
        let mut blobs: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        for (name, t) in self.model.params() {
            blobs.insert(name.clone(), t);
        }
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&self.optim.m, &self.optim.v]) {
            for (name, t) in moments {
                blobs.insert(format!("{prefix}{name}"), t);
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs {
            put_blob(&mut out, &name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(EkdError::Format("not a checkpoint (bad magic)".into()));
        }
        r.take(4, "magic")?;
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(EkdError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.len("metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| EkdError::Format(format!("bad checkpoint metadata: {e}")))?;
        let layout = parameter_layout(&meta.config);
        let count = r.u32("blob count")?;
        let mut params = BTreeMap::new();
        let mut moments = [BTreeMap::new(), BTreeMap::new()];
        for _ in 0..count {
            let name_len = r.u32("blob name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "blob name")?)
                .map_err(|_| EkdError::Format("blob name is not UTF-8".into()))?
                .to_string();
            let n = r.len("element count")?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| EkdError::Integrity("element count overflow".into()))?,
                &name,
            )?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (target, base) = match MOMENT_PREFIXES.iter().position(|p| name.starts_with(p)) {
                Some(i) => (
                    &mut moments[i],
                    name[MOMENT_PREFIXES[i].len()..].to_string(),
                ),
                None => (&mut params, name.clone()),
            };
            let shape = layout
                .get(&base)
                .ok_or_else(|| EkdError::Format(format!("unexpected blob {name}")))?;
            let t = Tensor::new(shape.clone(), data).map_err(|_| {
                EkdError::Integrity(format!(
                    "blob {name} has {n} elements, expected shape {shape:?}"
                ))
            })?;
            target.insert(base, t);
        }
        if r.pos != bytes.len() {
            return Err(EkdError::Integrity(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - r.pos
            )));
        }
        let model = TransformerModel::from_params(meta.config.clone(), params)?;
        let [m, v] = moments;
        let optim = OptimState {
            step: meta.optimizer_step,
            m,
            v,
            hyper: meta.optimizer,
        };
        Ok(Self { meta, model, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| EkdError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| EkdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EkdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
