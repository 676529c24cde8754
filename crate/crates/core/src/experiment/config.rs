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

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{EscapePolicy, Ini, WriteOption};

use crate::decode::{MaxLen, Smoothing};
use crate::error::{EkdError, Result};
use crate::model::ModelConfig;
use crate::train::AdamConfig;

/// Environment variable that replaces `[experiment] seed`.
pub const SEED_ENV: &str = "EKD_SEED";

/// INI-style configuration: `[section]` headers and `key = value` lines.
/// Relative paths resolve against the directory of the file.
#[derive(Clone, Debug)]
pub struct Settings {
    ini: Ini,
    base_dir: PathBuf,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EkdError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            EkdError::Config(msg) => EkdError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| EkdError::Config(e.to_string()))?;
        Ok(Self {
            ini,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.ini.with_section(Some(section)).set(key, value);
    }

    /// Apply `section.key=value`; the key is the text after the last dot.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (lhs, value) = spec.split_once('=').ok_or_else(|| {
            EkdError::Config(format!("override {spec:?} is not section.key=value"))
        })?;
        let (section, key) = lhs.trim().rsplit_once('.').ok_or_else(|| {
            EkdError::Config(format!("override {spec:?} is not section.key=value"))
        })?;
        self.set(section, key, value.trim());
        Ok(())
    }

    /// Replace the experiment seed with `EKD_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            v.trim().parse::<u64>().map_err(|_| {
                EkdError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
            self.set("experiment", "seed", v.trim());
        }
        Ok(())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.ini.section(Some(section)).is_some()
    }

    pub fn sections(&self) -> Vec<String> {
        self.ini.sections().flatten().map(str::to_string).collect()
    }

    /// Keys of `section` in file order.
    pub fn keys(&self, section: &str) -> Vec<String> {
        self.ini
            .section(Some(section))
            .map(|p| p.iter().map(|(k, _)| k.to_string()).collect())
            .unwrap_or_default()
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.ini
            .get_from(Some(section), key)
            .map(str::trim)
            .filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| EkdError::Config(format!("[{section}] {key} = {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(section, key)?
            .ok_or_else(|| EkdError::Config(format!("missing [{section}] {key}")))
    }

    pub fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.raw(section, key).map(|v| self.base_dir.join(v))
    }

    pub fn require_path(&self, section: &str, key: &str) -> Result<PathBuf> {
        self.path(section, key)
            .ok_or_else(|| EkdError::Config(format!("missing [{section}] {key}")))
    }

    /// The configuration as INI text, for logging.
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        let opt = WriteOption {
            escape_policy: EscapePolicy::Nothing,
            ..WriteOption::default()
        };
        self.ini
            .write_to_opt(&mut out, opt)
            .expect("writing to memory");
        String::from_utf8_lossy(&out).into_owned()
    }

    /// Model dimensions from `section`; the vocabulary size comes from the
    /// shared vocabulary.
    pub fn model_config(&self, section: &str, vocab_size: usize) -> Result<ModelConfig> {
        let d: usize = self.require(section, "embed_dim")?;
        let c = ModelConfig {
            embed_dim: d,
            ffn_dim: self.get_or(section, "ffn_dim", 4 * d)?,
            heads: self.get_or(section, "heads", 4)?,
            layers: self.get_or(section, "layers", 6)?,
            vocab_size,
            max_positions: self.get_or(section, "max_positions", 256)?,
            dropout: self.get_or(section, "dropout", 0.3)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn adam_config(&self) -> Result<AdamConfig> {
        let d = AdamConfig::default();
        let clip: f64 = self.get_or("optim", "clip_norm", 0.0)?;
        let c = AdamConfig {
            beta1: self.get_or("optim", "beta1", d.beta1)?,
            beta2: self.get_or("optim", "beta2", d.beta2)?,
            eps: self.get_or("optim", "eps", d.eps)?,
            lr: self.get_or("optim", "lr", d.lr)?,
            warmup: self.get_or("optim", "warmup", d.warmup)?,
            weight_decay: self.get_or("optim", "weight_decay", d.weight_decay)?,
            clip_norm: (clip > 0.0).then_some(clip),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn decode_settings(&self) -> Result<DecodeSettings> {
        let s = DecodeSettings {
            beam: self.get_or("decode", "beam", 5)?,
            length_penalty: self.get_or("decode", "length_penalty", 1.0)?,
            max_len: MaxLen {
                a: self.get_or("decode", "max_len_a", 1.5)?,
                b: self.get_or("decode", "max_len_b", 10)?,
            },
            bleu_smoothing: self.get_or("decode", "bleu_smoothing", Smoothing::Exp)?,
        };
        if s.beam == 0 {
            return Err(EkdError::Config("[decode] beam must be at least 1".into()));
        }
        Ok(s)
    }
}

/// Evaluation-time decoding options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSettings {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: MaxLen,
    pub bleu_smoothing: Smoothing,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 5,
            length_penalty: 1.0,
            max_len: MaxLen { a: 1.5, b: 10 },
            bleu_smoothing: Smoothing::Exp,
        }
    }
}
