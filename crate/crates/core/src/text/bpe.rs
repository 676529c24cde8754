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

use super::corpus::{read_lines, write_lines};
use super::pretok::pretokenize;
use crate::error::{EkdError, Result};

/// Suffix marking a subword that continues into the next one.
pub const DEFAULT_MARKER: &str = "@@";

/// Pairs that occur fewer times than this are never merged.
const MIN_PAIR_FREQUENCY: usize = 2;

/// Learned merge list, highest priority first.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeTable {
    merges: Vec<(String, String)>,
    marker: String,
    ranks: HashMap<(String, String), usize>,
}

fn count_pairs(words: &[(Vec<String>, usize)]) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    for (symbols, freq) in words {
        for w in symbols.windows(2) {
            *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += freq;
        }
    }
    counts
}

fn merge_word(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learn up to `num_merges` merges from word frequencies in `corpus`.
///
/// Each step merges the most frequent adjacent symbol pair; ties go to the
/// lexicographically smallest pair. Merges never cross word boundaries.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<BpeTable> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in pretokenize(line.as_ref()) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(EkdError::Data(
            "cannot learn BPE from an empty corpus".into(),
        ));
    }
    let mut words: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let counts = count_pairs(&words);
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum wins ties.
        let best =
            counts.iter().fold(
                None::<(&(String, String), usize)>,
                |best, (pair, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((pair, c)),
                },
            );
        let Some((pair, count)) = best else { break };
        if count < MIN_PAIR_FREQUENCY {
            break;
        }
        let pair = pair.clone();
        for (symbols, _) in &mut words {
            if symbols.len() > 1 {
                *symbols = merge_word(symbols, &pair);
            }
        }
        merges.push(pair);
    }
    BpeTable::new(merges, DEFAULT_MARKER)
}

impl BpeTable {
    pub fn new(merges: Vec<(String, String)>, marker: &str) -> Result<Self> {
        if marker.is_empty() {
            return Err(EkdError::Format("BPE marker must not be empty".into()));
        }
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        Ok(Self {
            merges,
            marker: marker.to_string(),
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Subwords of a single word; every piece except the last carries the marker.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            symbols = merge_word(&symbols, &self.merges[rank]);
        }
        let last = symbols.len().saturating_sub(1);
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i < last { s + &self.marker } else { s })
            .collect()
    }

    /// Pre-tokenize `text` and segment every word.
    pub fn segment(&self, text: &str) -> Vec<String> {
        pretokenize(text)
            .iter()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// Glue subwords back into space-separated words.
    pub fn join(&self, subwords: &[String]) -> String {
        let mut out = String::new();
        for s in subwords {
            match s.strip_suffix(&self.marker) {
                Some(stem) => out.push_str(stem),
                None => {
                    out.push_str(s);
                    out.push(' ');
                }
            }
        }
        out.trim_end().to_string()
    }

    /// Header line `#marker <marker>`, then one `left right` merge per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines = vec![format!("#marker {}", self.marker)];
        lines.extend(self.merges.iter().map(|(a, b)| format!("{a} {b}")));
        write_lines(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let header = lines
            .first()
            .ok_or_else(|| EkdError::Format(format!("{} is empty", path.display())))?;
        let marker = header.strip_prefix("#marker ").ok_or_else(|| {
            EkdError::Format(format!("{}: missing marker header", path.display()))
        })?;
        let mut merges = Vec::with_capacity(lines.len() - 1);
        for (i, line) in lines.iter().enumerate().skip(1) {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(EkdError::Format(format!(
                        "{}:{}: expected two symbols",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        Self::new(merges, marker)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_corpus() -> Vec<String> {
        let mut c = Vec::new();
        for (w, n) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
            for _ in 0..n {
                c.push(w.to_string());
            }
        }
        c
    }

    /// Brute force: count every adjacent pair of every word occurrence.
    fn oracle_best_pair(words: &[Vec<String>]) -> Option<(String, String)> {
        let mut all: Vec<((String, String), usize)> = Vec::new();
        for w in words {
            for i in 0..w.len().saturating_sub(1) {
                let p = (w[i].clone(), w[i + 1].clone());
                match all.iter_mut().find(|(q, _)| *q == p) {
                    Some((_, c)) => *c += 1,
                    None => all.push((p, 1)),
                }
            }
        }
        all.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        all.first()
            .filter(|(_, c)| *c >= MIN_PAIR_FREQUENCY)
            .map(|(p, _)| p.clone())
    }

    fn oracle_merges(corpus: &[String], n: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = corpus
            .iter()
            .flat_map(|l| pretokenize(l))
            .map(|w| w.chars().map(String::from).collect())
            .collect();
        let mut out = Vec::new();
        for _ in 0..n {
            let Some(p) = oracle_best_pair(&words) else {
                break;
            };
            for w in &mut words {
                let mut merged = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == p.0 && w[i + 1] == p.1 {
                        merged.push(format!("{}{}", p.0, p.1));
                        i += 2;
                    } else {
                        merged.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = merged;
            }
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_merges_is_character_level() {
        let t = learn_bpe(&toy_corpus(), 0).unwrap();
        assert_eq!(t.segment_word("low"), vec!["l@@", "o@@", "w"]);
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        let t = learn_bpe(&toy_corpus(), 1).unwrap();
        // e-s and s-t both occur 9 times; the lexicographic tie-break picks e-s
        assert_eq!(t.merges()[0], ("e".to_string(), "s".to_string()));
        assert_eq!(t.merges(), oracle_merges(&toy_corpus(), 1).as_slice());
    }

    #[test]
    fn first_five_merges_match_oracle() {
        let corpora = [
            toy_corpus(),
            vec![
                "the cat sat on the mat".into(),
                "the cat ate the rat".into(),
                "a mat".into(),
            ],
            vec!["abab abab ab".into(), "baba".into(), "aaaa bbbb".into()],
        ];
        for c in &corpora {
            for n in 0..=5 {
                let t = learn_bpe(c, n).unwrap();
                assert_eq!(
                    t.merges(),
                    oracle_merges(c, n).as_slice(),
                    "corpus {c:?}, {n} merges"
                );
            }
        }
    }

    #[test]
    fn round_trip_on_training_corpus() {
        let corpus = vec![
            "the lowest widest newer".to_string(),
            "low lower newest".to_string(),
        ];
        let t = learn_bpe(&corpus, 10).unwrap();
        for line in &corpus {
            assert_eq!(&t.join(&t.segment(line)), line);
        }
    }

    #[test]
    fn marker_glues_subwords() {
        let t = BpeTable::new(vec![], DEFAULT_MARKER).unwrap();
        assert_eq!(t.join(&["lo@@".to_string(), "w".to_string()]), "low");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<String> = vec!["   ".into()];
        assert!(matches!(learn_bpe(&empty, 3), Err(EkdError::Data(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.codes");
        let t = learn_bpe(&toy_corpus(), 4).unwrap();
        t.save(&path).unwrap();
        assert_eq!(BpeTable::load(&path).unwrap(), t);
        std::fs::write(&path, "no header\n").unwrap();
        assert!(matches!(BpeTable::load(&path), Err(EkdError::Format(_))));
    }
}
