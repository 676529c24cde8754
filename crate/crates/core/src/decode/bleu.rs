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
use std::str::FromStr;

use crate::error::{EkdError, Result};

const MAX_ORDER: usize = 4;

/// Treatment of n-gram orders with no matches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Smoothing {
    /// The k-th order with zero matches gets precision `1 / (2^k * total)`.
    #[default]
    Exp,
    None,
}

impl FromStr for Smoothing {
    type Err = EkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Self::Exp),
            "none" => Ok(Self::None),
            other => Err(EkdError::Config(format!(
                "unknown BLEU smoothing {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Smoothing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exp => "exp",
            Self::None => "none",
        })
    }
}

/// Summed corpus statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn add(&mut self, hyp: &str, reference: &str) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            self.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    /// Score in `[0, 100]`. Orders for which the hypotheses contain no
    /// n-grams at all are left out of the geometric mean.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        let mut halvings = 0;
        for n in 0..MAX_ORDER {
            let total = self.totals[n];
            if total == 0 {
                break;
            }
            orders += 1;
            let m = self.matches[n];
            if m == 0 {
                match smoothing {
                    Smoothing::Exp => {
                        halvings += 1;
                        log_sum -= (2f64.powi(halvings) * total as f64).ln();
                    }
                    Smoothing::None => return 0.0,
                }
            } else if m != total {
                log_sum += (m as f64 / total as f64).ln();
            }
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

/// Corpus BLEU-4 over whitespace tokens of detokenized text.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[S],
    refs: &[T],
    smoothing: Smoothing,
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(EkdError::Data(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(EkdError::Data("BLEU needs at least one reference".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score(smoothing))
}
