// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weighted forward-KL loss of the tuned lens and its analytic gradient.
//!
//! With `p = softmax(final)`, `q = softmax(z)`, `z = W_U·Norm(A·h + b)`:
//!
//! ```text
//! loss    = Σ_i w_i p_i (ln p_i − ln q_i)
//! ∂loss/∂z_j = S·q_j − w_j p_j,   S = Σ_i w_i p_i
//! ```
//!
//! When every weight equals the same `c`, `S = c` analytically and the
//! gradient is taken as `c·(q − p)`; for `c = 1` that is exactly `q − p`.

use crate::error::{Error, Result};
use crate::io::translators::Translator;
use crate::numerics::{self, check_finite, Matrix, NormKind, NormSpec};

/// Per-vocabulary weights on the KL terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    weights: Vec<f64>,
    uniform: Option<f64>,
}

impl TokenWeights {
    pub fn ones(vocab_size: usize) -> Self {
        Self {
            weights: vec![1.0; vocab_size],
            uniform: Some(1.0),
        }
    }

    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "token weight {i} must be finite and non-negative, got {}",
                weights[i]
            )));
        }
        let uniform = match weights.first() {
            Some(&w0) if weights.iter().all(|&w| w == w0) => Some(w0),
            _ => None,
        };
        Ok(Self { weights, uniform })
    }

    /// All ones except `token`, which gets `factor`.
    pub fn masked(vocab_size: usize, token: u32, factor: f64) -> Result<Self> {
        if token as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { token, vocab_size });
        }
        let mut w = vec![1.0; vocab_size];
        w[token as usize] = factor;
        Self::from_vec(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn uniform_value(&self) -> Option<f64> {
        self.uniform
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Vec<f64>,
}

/// Loss and gradient with respect to `(A, b)` for one example.
pub fn lens_loss_and_grad(
    final_logits: &[f64],
    h: &[f64],
    translator: &Translator,
    norm: &NormSpec,
    unembedding: &Matrix,
    token_weights: &TokenWeights,
) -> Result<LossGrad> {
    let d = translator.dim();
    let v = unembedding.rows();
    if h.len() != d || norm.dim() != d || unembedding.cols() != d {
        return Err(Error::Shape {
            what: "tuned lens inputs (hidden, norm, unembedding columns)".into(),
            expected: d,
            actual: if h.len() != d {
                h.len()
            } else if norm.dim() != d {
                norm.dim()
            } else {
                unembedding.cols()
            },
        });
    }
    if final_logits.len() != v || token_weights.len() != v {
        return Err(Error::Shape {
            what: "final logits / token weights".into(),
            expected: v,
            actual: if final_logits.len() != v {
                final_logits.len()
            } else {
                token_weights.len()
            },
        });
    }
    check_finite("final logits", final_logits)?;
    check_finite("hidden state", h)?;

    let p = numerics::softmax_unchecked(final_logits);
    let x = translator.apply(h);
    let (loss, grad_x) = loss_and_input_grad(&p, &x, norm, unembedding, token_weights);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "lens loss".into(),
            index: 0,
        });
    }
    check_finite("input gradient", &grad_x)?;

    let mut grad_a = Matrix::zeros(d, d);
    accumulate_outer(grad_a.as_mut_slice(), &grad_x, h);
    Ok(LossGrad {
        loss,
        grad_a,
        grad_b: grad_x,
    })
}

/// `out += g ⊗ h`, row-major `d × d`.
pub(crate) fn accumulate_outer(out: &mut [f64], g: &[f64], h: &[f64]) {
    let d = h.len();
    for (row, &gi) in out.chunks_exact_mut(d).zip(g) {
        for (o, &hj) in row.iter_mut().zip(h) {
            *o += gi * hj;
        }
    }
}

/// Loss and gradient with respect to the norm input `x = A·h + b`.
pub(crate) fn loss_and_input_grad(
    p: &[f64],
    x: &[f64],
    norm: &NormSpec,
    unembedding: &Matrix,
    weights: &TokenWeights,
) -> (f64, Vec<f64>) {
    let d = x.len();
    let df = d as f64;
    let gamma = norm.gamma();

    // Forward through the norm, keeping what the backward pass needs.
    let (y, normalized, inv) = match norm.kind() {
        NormKind::LayerNorm => {
            let mean = x.iter().sum::<f64>() / df;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
            let inv = 1.0 / (var + norm.eps()).sqrt();
            let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
            let beta = norm.beta().expect("layernorm carries beta");
            let y = xhat
                .iter()
                .zip(gamma)
                .zip(beta)
                .map(|((xh, g), b)| g * xh + b)
                .collect::<Vec<_>>();
            (y, xhat, inv)
        }
        NormKind::RmsNorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / df;
            let inv = 1.0 / (ms + norm.eps()).sqrt();
            let y = x.iter().zip(gamma).map(|(v, g)| g * (v * inv)).collect::<Vec<_>>();
            (y, Vec::new(), inv)
        }
    };

    let z = unembedding.matvec_unchecked(&y);
    let (loss, grad_z) = loss_and_logit_grad(p, &z, weights);

    let grad_y = unembedding.matvec_transposed_unchecked(&grad_z);
    let grad_u: Vec<f64> = grad_y.iter().zip(gamma).map(|(gy, g)| gy * g).collect();
    let grad_x = match norm.kind() {
        NormKind::LayerNorm => {
            let mean_g = grad_u.iter().sum::<f64>() / df;
            let mean_gx = grad_u.iter().zip(&normalized).map(|(g, xh)| g * xh).sum::<f64>() / df;
            grad_u
                .iter()
                .zip(&normalized)
                .map(|(g, xh)| inv * (g - mean_g - xh * mean_gx))
                .collect()
        }
        NormKind::RmsNorm => {
            let dot = grad_u.iter().zip(x).map(|(g, v)| g * v).sum::<f64>() / df;
            let inv3 = inv * inv * inv;
            grad_u.iter().zip(x).map(|(g, v)| inv * g - inv3 * v * dot).collect()
        }
    };
    (loss, grad_x)
}

/// Loss and gradient with respect to the lens logits `z`.
pub(crate) fn loss_and_logit_grad(p: &[f64], z: &[f64], weights: &TokenWeights) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|&zi| (zi - max).exp()).collect();
    let sum_exp: f64 = shifted.iter().sum();
    let log_sum = sum_exp.ln();
    // Same operations as `numerics::softmax`, so q matches it bitwise.
    let q: Vec<f64> = shifted.iter().map(|e| e / sum_exp).collect();
    let log_q = |i: usize| (z[i] - max) - log_sum;

    let mut loss = 0.0;
    match weights.uniform_value() {
        Some(c) => {
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    loss += pi * (pi.ln() - log_q(i));
                }
            }
            let grad = q.iter().zip(p).map(|(qi, pi)| c * (qi - pi)).collect();
            (c * loss, grad)
        }
        None => {
            let w = weights.as_slice();
            let mut s = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                let wp = w[i] * pi;
                s += wp;
                if pi > 0.0 {
                    loss += wp * (pi.ln() - log_q(i));
                }
            }
            let grad = q.iter().zip(p).zip(w).map(|((qi, pi), wi)| s * qi - wi * pi).collect();
            (loss, grad)
        }
    }
}
