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

use super::{Graph, Tensor, Var};
use crate::error::{EkdError, Result};

/// Compare reverse-mode gradients against central differences.
///
/// `f` builds a scalar from graph variables bound to `point` (one variable
/// per tensor, in order). Returns the largest
/// `|autodiff - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<Fun>(f: Fun, point: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-2).contains(&eps) {
        return Err(EkdError::Contract(format!(
            "finite-difference step {eps} outside [1e-7, 1e-2]"
        )));
    }

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(EkdError::Numeric(format!("function evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item()?.is_finite() {
        return Err(EkdError::Numeric(
            "function is not finite at the point".into(),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
        })
        .collect();

    let mut inputs = point.to_vec();
    let mut worst = 0.0f64;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[t].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new([3], vec![0.5, -2.0, 1.25]).unwrap();
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let w = g.constant(w.clone());
                let p = g.mul(v[0], w)?;
                Ok(g.sum(p))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|g, v| g.mul(v[0], v[0]), &[x], 0.0);
        assert!(matches!(r, Err(EkdError::Contract(_))));
    }

    #[test]
    fn reports_non_finite() {
        let x = Tensor::scalar(0.0);
        let r = grad_check(|g, v| Ok(g.log(v[0])), &[x], 1e-5);
        assert!(matches!(r, Err(EkdError::Numeric(_))));
    }
}
