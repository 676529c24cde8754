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

//! Transformer encoder-decoder shared by the student and every teacher.
//!
//! Pre-norm residual blocks, fixed sinusoidal positions and a single
//! embedding matrix used for encoder input, decoder input and the output
//! projection. Members of one family differ only in [`ModelConfig`].

mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EkdError, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use forward::{Mode, PaddedIds};

/// Architecture hyperparameters. Encoder and decoder use the same depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// `embed_dim`/`ffn_dim`/`heads`/`layers` with the remaining fields set to
    /// common defaults.
    pub fn new(
        embed_dim: usize,
        ffn_dim: usize,
        heads: usize,
        layers: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            embed_dim,
            ffn_dim,
            heads,
            layers,
            vocab_size,
            max_positions: 256,
            dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EkdError::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(EkdError::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(EkdError::Config(format!(
                "vocab_size {} cannot hold the four special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EkdError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Exact parameter count of [`TransformerModel::build`] for `config`, with
/// the shared embedding counted once.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.embed_dim;
    let f = config.ffn_dim;
    let attention = 4 * d * d + 4 * d;
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let encoder_layer = attention + ffn + 2 * norm;
    let decoder_layer = 2 * attention + ffn + 3 * norm;
    config.vocab_size * d + config.layers * (encoder_layer + decoder_layer) + 2 * norm
}

/// Names and shapes of every parameter, in sorted name order.
pub fn parameter_layout(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.embed_dim;
    let f = config.ffn_dim;
    let mut out = BTreeMap::new();
    out.insert("embed.weight".to_string(), vec![config.vocab_size, d]);
    let attention = |out: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            out.insert(format!("{prefix}.{proj}.weight"), vec![d, d]);
            out.insert(format!("{prefix}.{proj}.bias"), vec![d]);
        }
    };
    let norm = |out: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        out.insert(format!("{prefix}.gain"), vec![d]);
        out.insert(format!("{prefix}.bias"), vec![d]);
    };
    let ffn = |out: &mut BTreeMap<String, Vec<usize>>, prefix: &str| {
        out.insert(format!("{prefix}.fc1.weight"), vec![d, f]);
        out.insert(format!("{prefix}.fc1.bias"), vec![f]);
        out.insert(format!("{prefix}.fc2.weight"), vec![f, d]);
        out.insert(format!("{prefix}.fc2.bias"), vec![d]);
    };
    for l in 0..config.layers {
        let p = format!("encoder.layers.{l}");
        attention(&mut out, &format!("{p}.self_attn"));
        norm(&mut out, &format!("{p}.self_attn_norm"));
        ffn(&mut out, &format!("{p}.ffn"));
        norm(&mut out, &format!("{p}.ffn_norm"));

        let p = format!("decoder.layers.{l}");
        attention(&mut out, &format!("{p}.self_attn"));
        norm(&mut out, &format!("{p}.self_attn_norm"));
        attention(&mut out, &format!("{p}.cross_attn"));
        norm(&mut out, &format!("{p}.cross_attn_norm"));
        ffn(&mut out, &format!("{p}.ffn"));
        norm(&mut out, &format!("{p}.ffn_norm"));
    }
    norm(&mut out, "encoder.final_norm");
    norm(&mut out, "decoder.final_norm");
    out
}

/// One encoder-decoder model: its configuration and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<F: Scalar> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<F>>,
}

/// Graph variables for a model's parameters within one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| EkdError::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<F: Scalar> TransformerModel<F> {
    /// Fresh model. Matrices are Xavier-uniform, biases zero, norm gains one.
    /// Parameters are drawn in sorted name order, so `(config, seed)` fixes
    /// every byte.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in parameter_layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::full(shape, F::one())
            } else if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.gen_range(-a..a)))
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Assemble a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(EkdError::Format(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(EkdError::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(EkdError::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> TransformerModel<G> {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Put every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Bind existing graph variables as the parameters, in name order
    /// (the order of [`params`](Self::params)).
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(EkdError::Contract(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars: self
                .params
                .keys()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
        })
    }

    /// SHA-256 over parameter names and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
