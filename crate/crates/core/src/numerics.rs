// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerically stable primitives shared by the lens pipeline.
//!
//! Everything here works on `f64` slices. Reductions always run left to
//! right so that identical inputs give bitwise-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad shapes and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                what: "matrix data".into(),
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self · x`, each row summed left to right.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape {
                what: "matrix-vector product".into(),
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `selfᵀ · y` without materialising the transpose.
    pub(crate) fn matvec_transposed_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols.max(1)).zip(y) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::LayerNorm => "layernorm",
            NormKind::RmsNorm => "rmsnorm",
        }
    }
}

/// Final normalization applied before the unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    kind: NormKind,
    eps: f64,
    gamma: Vec<f64>,
    beta: Option<Vec<f64>>,
}

impl NormSpec {
    /// Validates `eps`, gamma/beta lengths, and that beta is present
    /// exactly for layernorm.
    ///
    /// `eps = 0` is accepted so that hand-checked values can be reproduced;
    /// files read from disk go through [`NormSpec::validated_for_dump`].
    pub fn new(kind: NormKind, eps: f64, gamma: Vec<f64>, beta: Option<Vec<f64>>) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidNorm(format!("eps must be finite and >= 0, got {eps}")));
        }
        check_finite("norm gamma", &gamma)?;
        match (kind, &beta) {
            (NormKind::LayerNorm, None) => {
                return Err(Error::InvalidNorm("layernorm requires beta".into()));
            }
            (NormKind::RmsNorm, Some(_)) => {
                return Err(Error::InvalidNorm("rmsnorm must not carry beta".into()));
            }
            (NormKind::LayerNorm, Some(b)) => {
                if b.len() != gamma.len() {
                    return Err(Error::Shape {
                        what: "norm beta".into(),
                        expected: gamma.len(),
                        actual: b.len(),
                    });
                }
                check_finite("norm beta", b)?;
            }
            (NormKind::RmsNorm, None) => {}
        }
        Ok(Self { kind, eps, gamma, beta })
    }

    pub fn layernorm(eps: f64, gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        Self::new(NormKind::LayerNorm, eps, gamma, Some(beta))
    }

    pub fn rmsnorm(eps: f64, gamma: Vec<f64>) -> Result<Self> {
        Self::new(NormKind::RmsNorm, eps, gamma, None)
    }

    pub(crate) fn validated_for_dump(self) -> Result<Self> {
        if self.eps <= 0.0 {
            return Err(Error::InvalidNorm(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(self)
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Softmax with max subtraction. Rejects non-finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite("logits", logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Forward KL divergence `Σ p_i ln(p_i / q_i)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            what: "kl_divergence q".into(),
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(weighted_kl(p, q, None))
}

/// `Σ w_i p_i ln(p_i / q_i)`; `None` means all weights are one.
pub(crate) fn weighted_kl(p: &[f64], q: &[f64], weights: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let pi = p[i];
        if pi == 0.0 {
            continue;
        }
        let term = pi * (pi / q[i]).ln();
        total += match weights {
            Some(w) => w[i] * term,
            None => term,
        };
    }
    // Clamp rounding noise so the unweighted divergence stays non-negative.
    if weights.is_none() && total < 0.0 {
        0.0
    } else {
        total
    }
}

/// Applies the final normalization to `h`.
pub fn apply_norm(h: &[f64], spec: &NormSpec) -> Result<Vec<f64>> {
    if h.len() != spec.dim() {
        return Err(Error::Shape {
            what: "hidden state for norm".into(),
            expected: spec.dim(),
            actual: h.len(),
        });
    }
    check_finite("hidden state", h)?;
    Ok(apply_norm_unchecked(h, spec))
}

pub(crate) fn apply_norm_unchecked(h: &[f64], spec: &NormSpec) -> Vec<f64> {
    let d = h.len() as f64;
    match spec.kind {
        NormKind::LayerNorm => {
            let mean = h.iter().sum::<f64>() / d;
            let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + spec.eps).sqrt();
            let beta = spec.beta.as_deref().unwrap_or(&[]);
            h.iter()
                .zip(&spec.gamma)
                .zip(beta)
                .map(|((x, g), b)| g * ((x - mean) * inv) + b)
                .collect()
        }
        NormKind::RmsNorm => {
            let ms = h.iter().map(|x| x * x).sum::<f64>() / d;
            let inv = 1.0 / (ms + spec.eps).sqrt();
            h.iter().zip(&spec.gamma).map(|(x, g)| g * (x * inv)).collect()
        }
    }
}

/// Multiplies the unembedding matrix (`|V| × d`) with `x`.
pub fn project(unembedding: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    unembedding.matvec(x)
}

/// 1-based rank of `token`; ties go to the lower token id.
pub fn rank_of(logits: &[f64], token: u32) -> Result<usize> {
    let t = token as usize;
    if t >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: logits.len(),
        });
    }
    Ok(rank_unchecked(logits, t))
}

pub(crate) fn rank_unchecked(logits: &[f64], t: usize) -> usize {
    let target = logits[t];
    let above = logits.iter().filter(|&&z| z > target).count();
    let tied_below = logits[..t].iter().filter(|&&z| z == target).count();
    1 + above + tied_below
}

/// Index of the rank-1 token. Returns 0 for an empty slice.
pub fn top1(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}
