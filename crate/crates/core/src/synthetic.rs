// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic dumps for tests, benchmarks and demos.
//!
//! Every dump produced here satisfies the dump invariants: final logits
//! are the logit lens of the last layer (stored at float32) and targets
//! are their top-1 tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::io::dump::{widen, Labels, ModelDump, StoredNorm};
use crate::numerics::{self, Matrix, NormKind};

/// Part-of-speech style categories cycled through the `pos` label.
pub const CATEGORIES: [&str; 3] = ["DET", "NOUN", "VERB"];

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub examples: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub vocab: usize,
    pub norm: NormKind,
    pub seed: u64,
    /// Std-dev of the unembedding entries; larger values give peakier
    /// distributions.
    pub logit_scale: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            examples: 6,
            layers: 3,
            hidden_dim: 4,
            vocab: 12,
            norm: NormKind::LayerNorm,
            seed: 7,
            logit_scale: 1.5,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_norm(rng: &mut ChaCha8Rng, kind: NormKind, d: usize) -> StoredNorm {
    let gamma = (0..d).map(|_| (1.0 + 0.1 * normal(rng)) as f32).collect();
    let beta = match kind {
        NormKind::LayerNorm => Some((0..d).map(|_| (0.1 * normal(rng)) as f32).collect()),
        NormKind::RmsNorm => None,
    };
    StoredNorm {
        kind,
        eps: 1e-5,
        gamma,
        beta,
    }
}

/// Assembles a dump from float32 hidden states, deriving final logits,
/// targets and labels.
fn finish(
    name: &str,
    layers: usize,
    d: usize,
    vocab: usize,
    norm: StoredNorm,
    unembedding: Vec<f32>,
    hidden_states: Vec<f32>,
) -> ModelDump {
    let examples = hidden_states.len() / (layers * d);
    let spec = norm.to_spec().expect("generated norm is valid");
    let w = Matrix::from_vec(vocab, d, widen(&unembedding)).expect("generated shape");
    let mut final_logits = Vec::with_capacity(examples * vocab);
    let mut target_tokens = Vec::with_capacity(examples);
    let mut labels = Vec::with_capacity(examples);
    for n in 0..examples {
        let start = (n * layers + layers - 1) * d;
        let h = widen(&hidden_states[start..start + d]);
        let logits: Vec<f32> = w
            .matvec_unchecked(&numerics::apply_norm_unchecked(&h, &spec))
            .into_iter()
            .map(|z| z as f32)
            .collect();
        target_tokens.push(numerics::top1(&widen(&logits)));
        final_logits.extend(logits);
        labels.push(Labels::from([
            ("pos".to_string(), CATEGORIES[n % CATEGORIES.len()].to_string()),
            ("options".to_string(), "0|1|2".to_string()),
        ]));
    }
    ModelDump {
        model_name: name.to_string(),
        num_layers: layers,
        hidden_dim: d,
        vocab_size: vocab,
        num_examples: examples,
        norm,
        unembedding,
        hidden_states,
        final_logits: Some(final_logits),
        target_tokens,
        labels: Some(labels),
    }
}

/// Independent Gaussian hidden states at every layer.
pub fn toy_dump(spec: &ToySpec) -> ModelDump {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.hidden_dim;
    let norm = random_norm(&mut rng, spec.norm, d);
    let unembedding = (0..spec.vocab * d)
        .map(|_| (spec.logit_scale * normal(&mut rng)) as f32)
        .collect();
    let hidden_states = (0..spec.examples * spec.layers * d)
        .map(|_| normal(&mut rng) as f32)
        .collect();
    finish("toy", spec.layers, d, spec.vocab, norm, unembedding, hidden_states)
}

#[derive(Debug, Clone)]
pub struct AffineSpec {
    pub examples: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub vocab: usize,
    pub norm: NormKind,
    pub seed: u64,
    /// Size of the off-identity part of each mixing matrix `M_l`.
    pub mixing: f64,
    /// Std-dev of each offset `c_l`.
    pub offset: f64,
    pub logit_scale: f64,
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self {
            examples: 512,
            layers: 4,
            hidden_dim: 8,
            vocab: 32,
            norm: NormKind::LayerNorm,
            seed: 2024,
            mixing: 0.3,
            offset: 0.3,
            logit_scale: 1.0,
        }
    }
}

/// A dump where layer `l` is an exact affine image of the last layer,
/// `h^l = M_l·h^L + c_l`, so a perfect translator `A_l = M_l⁻¹` exists.
///
/// Returns the dump and the `(M_l, c_l)` pairs for layers `1..L-1`.
pub fn affine_dump(spec: &AffineSpec) -> (ModelDump, Vec<(Matrix, Vec<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, layers) = (spec.hidden_dim, spec.layers);
    let norm = random_norm(&mut rng, spec.norm, d);
    let unembedding: Vec<f32> = (0..spec.vocab * d)
        .map(|_| (spec.logit_scale * normal(&mut rng)) as f32)
        .collect();
    let maps: Vec<(Matrix, Vec<f64>)> = (0..layers.saturating_sub(1))
        .map(|_| {
            let mut m = Matrix::identity(d);
            let s = spec.mixing / (d as f64).sqrt();
            for v in m.as_mut_slice() {
                *v += s * normal(&mut rng);
            }
            let c = (0..d).map(|_| spec.offset * normal(&mut rng)).collect();
            (m, c)
        })
        .collect();
    let mut hidden_states = Vec::with_capacity(spec.examples * layers * d);
    for _ in 0..spec.examples {
        let last: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        for (m, c) in &maps {
            let h = m.matvec_unchecked(&last);
            hidden_states.extend(h.iter().zip(c).map(|(a, b)| (a + b) as f32));
        }
        hidden_states.extend(last.iter().map(|&v| v as f32));
    }
    let dump = finish("affine", layers, d, spec.vocab, norm, unembedding, hidden_states);
    (dump, maps)
}
