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

use crate::error::{EkdError, Result};
use crate::model::{Mode, PaddedIds, TransformerModel};
use crate::tensor::{gemm, log_softmax_in_place, Graph, Scalar, Tensor};
use crate::text::{BOS, EOS, PAD, UNK};

/// Sentences sharing one encoder call.
pub const DECODE_CHUNK: usize = 128;

/// A finished output sequence. `tokens` ends in eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of per-token log-probabilities.
    pub score: f64,
    /// `score / len^length_penalty`.
    pub normalized: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, score: f64, length_penalty: f64) -> Self {
        let normalized = score / (tokens.len() as f64).powf(length_penalty);
        Self {
            tokens,
            score,
            normalized,
        }
    }

    /// Tokens without the trailing eos.
    pub fn body(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Output length limit for a source: `floor(a * len + b)`, at least 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxLen {
    pub a: f64,
    pub b: usize,
}

impl MaxLen {
    pub fn fixed(n: usize) -> Self {
        Self { a: 0.0, b: n }
    }

    pub fn for_source(&self, src_len: usize) -> usize {
        ((self.a * src_len as f64).floor() as usize + self.b).max(1)
    }
}

struct Encoded<F> {
    states: Vec<F>,
    len: usize,
}

fn encode_chunk<F: Scalar>(
    model: &TransformerModel<F>,
    sources: &[&[u32]],
) -> Result<Vec<Encoded<F>>> {
    let d = model.config().embed_dim;
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g, false);
    let src = PaddedIds::from_sequences(sources, PAD);
    let mem = model.encode(&mut g, &p, &src, &mut Mode::Eval)?;
    let data = g.value(mem).data();
    Ok(sources
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let start = b * src.len * d;
            Encoded {
                states: data[start..start + s.len() * d].to_vec(),
                len: s.len(),
            }
        })
        .collect())
}

/// Log-probabilities of the next token for each `(sentence, prefix)` row.
/// All prefixes must have the same length.
fn next_log_probs<F: Scalar>(
    model: &TransformerModel<F>,
    memories: &[Encoded<F>],
    rows: &[(usize, &[u32])],
) -> Result<Vec<Vec<f64>>> {
    let d = model.config().embed_dim;
    let v = model.config().vocab_size;
    let n = rows.len();
    let mem_len = rows
        .iter()
        .map(|&(s, _)| memories[s].len)
        .max()
        .unwrap_or(0);
    let mut mem = vec![F::zero(); n * mem_len * d];
    let mut valid = vec![false; n * mem_len];
    for (r, &(s, _)) in rows.iter().enumerate() {
        let m = &memories[s];
        mem[r * mem_len * d..r * mem_len * d + m.len * d].copy_from_slice(&m.states);
        valid[r * mem_len..r * mem_len + m.len].fill(true);
    }
    let inputs: Vec<Vec<u32>> = rows
        .iter()
        .map(|(_, prefix)| std::iter::once(BOS).chain(prefix.iter().copied()).collect())
        .collect();
    let tgt = PaddedIds::from_sequences(&inputs, PAD);

    let mut g = Graph::no_grad();
    let p = model.bind(&mut g, false);
    let memory = g.constant(Tensor::new(vec![n * mem_len, d], mem)?);
    let y = model.decode_states(&mut g, &p, memory, &valid, mem_len, &tgt, &mut Mode::Eval)?;
    let states = g.value(y).data();
    let mut last = Vec::with_capacity(n * d);
    for r in 0..n {
        let at = (r * tgt.len + tgt.len - 1) * d;
        last.extend_from_slice(&states[at..at + d]);
    }
    let embed = model.params()["embed.weight"].data();
    let mut logits = vec![F::zero(); n * v];
    gemm(n, d, v, &last, false, embed, true, &mut logits, false);
    Ok(logits
        .chunks(v)
        .map(|row| {
            let mut lp: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
            log_softmax_in_place(&mut lp);
            lp
        })
        .collect())
}

/// Tokens a decoder may emit at `step` (0-based) of `max_len`. Pad, bos and
/// unk are never produced.
fn allowed(token: usize, step: usize, max_len: usize) -> bool {
    let t = token as u32;
    if step + 1 >= max_len {
        t == EOS
    } else {
        t != PAD && t != BOS && t != UNK
    }
}

fn check_max_len(max_len: usize, model_limit: usize) -> Result<()> {
    if max_len < 1 {
        return Err(EkdError::Contract("max_len must be at least 1".into()));
    }
    if max_len > model_limit {
        return Err(EkdError::Length(format!(
            "max_len {max_len} exceeds the model's {model_limit} positions"
        )));
    }
    Ok(())
}

fn best_token(lp: &[f64], step: usize, max_len: usize) -> (u32, f64) {
    let mut best = (EOS, f64::NEG_INFINITY);
    for (k, &x) in lp.iter().enumerate() {
        if allowed(k, step, max_len) && x > best.1 {
            best = (k as u32, x);
        }
    }
    best
}

/// Greedy decoding of many sources, `DECODE_CHUNK` sentences per encoder call.
/// Length limits are capped at the model's position count.
pub fn greedy_batch<F: Scalar>(
    model: &TransformerModel<F>,
    sources: &[Vec<u32>],
    max_len: MaxLen,
) -> Result<Vec<Hypothesis>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_CHUNK) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let memories = encode_chunk(model, &refs)?;
        let limits: Vec<usize> = chunk
            .iter()
            .map(|s| {
                max_len
                    .for_source(s.len())
                    .min(model.config().max_positions)
            })
            .collect();
        let mut seqs: Vec<Vec<u32>> = vec![Vec::new(); chunk.len()];
        let mut scores = vec![0.0; chunk.len()];
        let mut live: Vec<usize> = (0..chunk.len()).collect();
        let mut step = 0;
        while !live.is_empty() {
            let rows: Vec<(usize, &[u32])> =
                live.iter().map(|&i| (i, seqs[i].as_slice())).collect();
            let lps = next_log_probs(model, &memories, &rows)?;
            let picks: Vec<(u32, f64)> = live
                .iter()
                .zip(&lps)
                .map(|(&i, lp)| best_token(lp, step, limits[i]))
                .collect();
            for (&i, (tok, lp)) in live.iter().zip(picks) {
                seqs[i].push(tok);
                scores[i] += lp;
            }
            live.retain(|&i| *seqs[i].last().unwrap() != EOS);
            step += 1;
        }
        out.extend(
            seqs.into_iter()
                .zip(scores)
                .map(|(t, s)| Hypothesis::new(t, s, 1.0)),
        );
    }
    Ok(out)
}

pub fn greedy_decode<F: Scalar>(
    model: &TransformerModel<F>,
    src: &[u32],
    max_len: usize,
) -> Result<Hypothesis> {
    check_max_len(max_len, model.config().max_positions)?;
    Ok(greedy_batch(model, &[src.to_vec()], MaxLen::fixed(max_len))?.remove(0))
}

struct BeamState {
    active: Vec<(Vec<u32>, f64)>,
    finished: Vec<Hypothesis>,
    max_len: usize,
    done: bool,
}

/// Beam search over many sources.
///
/// Each step ranks every extension of every live hypothesis and looks at the
/// best `2 * beam`. An eos extension ranked within the first `beam` becomes a
/// finished hypothesis; the best `beam` non-eos extensions stay live. A
/// sentence stops once `beam` hypotheses have finished. Pad, bos and unk are
/// never emitted and eos is forced at the last position.
pub fn beam_batch<F: Scalar>(
    model: &TransformerModel<F>,
    sources: &[Vec<u32>],
    beam: usize,
    max_len: MaxLen,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>> {
    if beam < 1 {
        return Err(EkdError::Contract("beam size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_CHUNK) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let memories = encode_chunk(model, &refs)?;
        let mut states = Vec::with_capacity(chunk.len());
        for s in chunk {
            let l = max_len
                .for_source(s.len())
                .min(model.config().max_positions);
            states.push(BeamState {
                active: vec![(Vec::new(), 0.0)],
                finished: Vec::new(),
                max_len: l,
                done: false,
            });
        }
        let mut step = 0;
        loop {
            let mut rows: Vec<(usize, &[u32])> = Vec::new();
            for (i, st) in states.iter().enumerate().filter(|(_, st)| !st.done) {
                rows.extend(st.active.iter().map(|(t, _)| (i, t.as_slice())));
            }
            if rows.is_empty() {
                break;
            }
            let lps = next_log_probs(model, &memories, &rows)?;
            let mut cursor = 0;
            for st in states.iter_mut().filter(|st| !st.done) {
                let n = st.active.len();
                advance(st, &lps[cursor..cursor + n], beam, step, length_penalty);
                cursor += n;
            }
            step += 1;
        }
        for st in states {
            let best = st
                .finished
                .into_iter()
                .reduce(|a, b| if b.normalized > a.normalized { b } else { a })
                .expect("eos is forced at the last step");
            out.push(best);
        }
    }
    Ok(out)
}

fn advance(st: &mut BeamState, lps: &[Vec<f64>], beam: usize, step: usize, length_penalty: f64) {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (h, lp) in lps.iter().enumerate() {
        let base = st.active[h].1;
        for (k, &x) in lp.iter().enumerate() {
            if allowed(k, step, st.max_len) && x.is_finite() {
                cands.push((base + x, h, k));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(2 * beam);
    let mut next = Vec::with_capacity(beam);
    for (rank, &(score, h, k)) in cands.iter().enumerate() {
        let mut tokens = st.active[h].0.clone();
        tokens.push(k as u32);
        if k as u32 == EOS {
            if rank < beam && st.finished.len() < beam {
                st.finished
                    .push(Hypothesis::new(tokens, score, length_penalty));
            }
        } else if next.len() < beam {
            next.push((tokens, score));
        }
    }
    st.active = next;
    if st.finished.len() >= beam || st.active.is_empty() {
        st.done = true;
    }
}

pub fn beam_search<F: Scalar>(
    model: &TransformerModel<F>,
    src: &[u32],
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    check_max_len(max_len, model.config().max_positions)?;
    Ok(beam_batch(
        model,
        &[src.to_vec()],
        beam,
        MaxLen::fixed(max_len),
        length_penalty,
    )?
    .remove(0))
}

/// Teacher-forced log-probability of `tokens` given `src`.
pub fn score_sequence<F: Scalar>(
    model: &TransformerModel<F>,
    src: &[u32],
    tokens: &[u32],
) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let prefix: Vec<u32> = std::iter::once(BOS)
        .chain(tokens[..tokens.len() - 1].iter().copied())
        .collect();
    let logits = model.forward(src, &prefix)?;
    let mut total = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let mut lp: Vec<f64> = logits.row(t).iter().map(|x| x.to_f64_lossy()).collect();
        log_softmax_in_place(&mut lp);
        total += lp[tok as usize];
    }
    Ok(total)
}
