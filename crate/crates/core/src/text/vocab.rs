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

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::bpe::BpeTable;
use super::corpus::{read_lines, write_lines};
use crate::error::{EkdError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token list shared by every model of an experiment; the line number of a
/// token in the vocabulary file is its id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

/// Count subwords on both sides and order them by descending frequency,
/// breaking ties lexicographically. Specials take ids 0 to 3.
pub fn build_joint_vocab<S: AsRef<str>>(
    src: &[S],
    tgt: &[S],
    bpe: &BpeTable,
) -> Result<Vocabulary> {
    if src.is_empty() || tgt.is_empty() {
        return Err(EkdError::Data(
            "joint vocabulary needs non-empty corpora on both sides".into(),
        ));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in src.iter().chain(tgt) {
        for piece in bpe.segment(line.as_ref()) {
            *freq.entry(piece).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

impl Vocabulary {
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < SPECIALS.len()
            || id_to_token.iter().zip(SPECIALS).any(|(a, b)| a != b)
        {
            return Err(EkdError::Format(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(EkdError::Format(format!(
                    "invalid vocabulary entry {t:?} at id {i}"
                )));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(EkdError::Format(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map_or(SPECIALS[UNK as usize], String::as_str)
    }

    /// Segment, map to ids and append the end-of-sentence id.
    pub fn encode(&self, text: &str, bpe: &BpeTable) -> Vec<u32> {
        let mut ids: Vec<u32> = bpe.segment(text).iter().map(|p| self.id(p)).collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of [`encode`](Self::encode). Stops at the first end-of-sentence
    /// id, drops pad and bos, and renders unknown ids as `<unk>`.
    pub fn decode(&self, ids: &[u32], bpe: &BpeTable) -> String {
        let pieces: Vec<String> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).to_string())
            .collect();
        bpe.join(&pieces)
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.id_to_token)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_lines(path)?)
    }
}
