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

use serde::{Deserialize, Serialize};

use crate::error::{EkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam hyperparameters and the inverse-square-root schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            lr: 5e-4,
            warmup: 4000,
            weight_decay: 1e-4,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(EkdError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// Linear warmup to `lr` over `warmup` steps, then `lr * sqrt(warmup / step)`.
    /// With no warmup the rate is constant.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(EkdError::Contract("learning-rate steps start at 1".into()));
        }
        if self.warmup == 0 {
            return Ok(self.lr);
        }
        let (s, w) = (step as f64, self.warmup as f64);
        Ok(if step <= self.warmup {
            self.lr * s / w
        } else {
            self.lr * (w / s).sqrt()
        })
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub hyper: AdamConfig,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            hyper,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> Result<f64> {
        self.hyper.lr_at(self.step + 1)
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`theta *= 1 - lr * wd` before the moment step). Returns the learning
/// rate used.
pub fn adam_step<F: Scalar>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimState<F>,
) -> Result<f64> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| EkdError::Shape(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(EkdError::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(EkdError::Numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    let h = state.hyper;
    let t = state.step + 1;
    let lr = h.lr_at(t)?;
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    let decay = F::from_f64_lossy(1.0 - lr * h.weight_decay);
    let (b1, b2) = (F::from_f64_lossy(h.beta1), F::from_f64_lossy(h.beta2));
    let (one_b1, one_b2) = (
        F::from_f64_lossy(1.0 - h.beta1),
        F::from_f64_lossy(1.0 - h.beta2),
    );
    let (lr_f, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(h.eps));
    let (bc1, bc2) = (F::from_f64_lossy(bc1), F::from_f64_lossy(bc2));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in iter {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *theta = *theta * decay - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(lr)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
