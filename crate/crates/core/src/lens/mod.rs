// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens and tuned lens decoding of intermediate hidden states.
//!
//! The logit lens maps a hidden state straight through the final norm and
//! the unembedding. The tuned lens first applies a per-layer affine
//! translator `A_l·h + b_l`.

mod grad;
mod train;

pub use grad::{lens_loss_and_grad, LossGrad, TokenWeights};
pub use train::{
    mean_kl, train_masked_translators, train_translators, EpochLog, ExampleSkip, Init, Optimizer, TrainConfig,
    TrainOutput,
};

use crate::error::{Error, Result};
use crate::io::dump::{widen, ModelDump};
use crate::io::translators::{Translator, TranslatorSet};
use crate::numerics::{self, Matrix, NormSpec};
use crate::par::Exec;

/// `W_U · Norm_f(h)`
pub fn logit_lens(h: &[f64], norm: &NormSpec, unembedding: &Matrix) -> Result<Vec<f64>> {
    if unembedding.cols() != norm.dim() {
        return Err(Error::Shape {
            what: "unembedding columns".into(),
            expected: norm.dim(),
            actual: unembedding.cols(),
        });
    }
    let y = numerics::apply_norm(h, norm)?;
    numerics::project(unembedding, &y)
}

/// `logit_lens(A·h + b)`
pub fn tuned_lens(h: &[f64], translator: &Translator, norm: &NormSpec, unembedding: &Matrix) -> Result<Vec<f64>> {
    if h.len() != translator.dim() {
        return Err(Error::Shape {
            what: "hidden state for translator".into(),
            expected: translator.dim(),
            actual: h.len(),
        });
    }
    logit_lens(&translator.apply(h), norm, unembedding)
}

#[derive(Debug, Clone, Copy)]
pub enum Lens<'a> {
    Logit,
    Tuned(&'a TranslatorSet),
}

impl Lens<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Lens::Logit => "logit",
            Lens::Tuned(_) => "tuned",
        }
    }
}

/// Decodes dump hidden states under one lens.
pub struct Decoder<'a> {
    dump: &'a ModelDump,
    norm: NormSpec,
    unembedding: Matrix,
    lens: Lens<'a>,
    exec: Exec,
}

impl<'a> Decoder<'a> {
    pub fn new(dump: &'a ModelDump, lens: Lens<'a>) -> Result<Self> {
        if let Lens::Tuned(set) = lens {
            if set.num_layers() != dump.num_layers || set.hidden_dim() != dump.hidden_dim {
                return Err(Error::Config(format!(
                    "translators cover {} layers of dimension {}, dump has {} layers of dimension {}",
                    set.num_layers(),
                    set.hidden_dim(),
                    dump.num_layers,
                    dump.hidden_dim
                )));
            }
        }
        Ok(Self {
            dump,
            norm: dump.norm_spec()?,
            unembedding: dump.unembedding_matrix(),
            lens,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn dump(&self) -> &'a ModelDump {
        self.dump
    }

    pub fn lens(&self) -> Lens<'a> {
        self.lens
    }

    pub fn norm(&self) -> &NormSpec {
        &self.norm
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    /// Logits of example `n` at 0-based `layer`.
    pub fn decode(&self, n: usize, layer: usize) -> Vec<f64> {
        let h = widen(self.dump.hidden(n, layer));
        let x = match self.lens {
            Lens::Logit => h,
            Lens::Tuned(set) => set.layer(layer).apply(&h),
        };
        self.unembedding
            .matvec_unchecked(&numerics::apply_norm_unchecked(&x, &self.norm))
    }

    /// All layers of example `n`, in layer order.
    pub fn decode_example(&self, n: usize) -> Vec<Vec<f64>> {
        (0..self.dump.num_layers).map(|l| self.decode(n, l)).collect()
    }

    /// Reference distribution logits (stored, or recomputed from the last
    /// layer) for example `n`.
    pub fn final_logits(&self, n: usize) -> Vec<f64> {
        self.dump.final_logits_f64(n, &self.norm, &self.unembedding)
    }

    /// Every `(example, layer)` decoded. Holds `N·L·|V|` floats, so large
    /// dumps should go through the streaming analyses instead.
    pub fn decode_all(&self) -> DecodedLogits {
        let (n, l, v) = (self.dump.num_examples, self.dump.num_layers, self.dump.vocab_size);
        let rows = self.exec.map(0..n, |i| self.decode_example(i));
        let mut data = Vec::with_capacity(n * l * v);
        for ex in rows {
            for layer in ex {
                data.extend_from_slice(&layer);
            }
        }
        DecodedLogits {
            examples: n,
            layers: l,
            vocab: v,
            data,
        }
    }
}

/// Dense `[examples, layers, vocab]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLogits {
    pub examples: usize,
    pub layers: usize,
    pub vocab: usize,
    data: Vec<f64>,
}

impl DecodedLogits {
    pub fn from_vec(examples: usize, layers: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != examples * layers * vocab {
            return Err(Error::Shape {
                what: "decoded logits".into(),
                expected: examples * layers * vocab,
                actual: data.len(),
            });
        }
        Ok(Self {
            examples,
            layers,
            vocab,
            data,
        })
    }

    /// Logits at example `n`, 0-based `layer`.
    pub fn get(&self, n: usize, layer: usize) -> &[f64] {
        let start = (n * self.layers + layer) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}
