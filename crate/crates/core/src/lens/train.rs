// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch training of per-layer translators by KL minimization.
//!
//! Each layer is an independent job with its own RNG stream derived from
//! the seed and the layer index, so results do not depend on how jobs are
//! scheduled. `W_U` and the final norm stay frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::grad::{accumulate_outer, loss_and_input_grad, TokenWeights};
use crate::error::{Error, Result};
use crate::io::dump::{widen, ModelDump};
use crate::io::translators::{MaskInfo, MaskMode, TrainingMetadata, Translator, TranslatorSet};
use crate::numerics::{self, Matrix, NormSpec};
use crate::par::Exec;

const SKIP_STREAM: u64 = 0x5348_4950_5f4d_534b;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    fn describe(&self) -> String {
        match self {
            Optimizer::Adam { beta1, beta2, eps } => format!("adam({beta1},{beta2},{eps})"),
            Optimizer::Sgd => "sgd".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Init {
    /// `A = I`, `b = 0`.
    #[default]
    Identity,
    /// `A = I + scale·N(0, 1)` entrywise, `b = 0`.
    Random { scale: f64 },
}

impl Init {
    fn describe(&self) -> String {
        match self {
            Init::Identity => "identity".into(),
            Init::Random { scale } => format!("random({scale})"),
        }
    }
}

/// Drops examples whose target is `token`, keeping each with probability
/// `keep_prob`, independently per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleSkip {
    pub token: u32,
    pub keep_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Passes over the dump.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub init: Init,
    /// Defaults to all ones.
    pub token_weights: Option<TokenWeights>,
    pub example_skip: Option<ExampleSkip>,
    /// Also optimize the last layer instead of pinning it to the identity.
    pub train_final_layer: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            init: Init::Identity,
            token_weights: None,
            example_skip: None,
            train_final_layer: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if let Init::Random { scale } = self.init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!(
                    "init scale must be finite and >= 0, got {scale}"
                )));
            }
        }
        if let Some(w) = &self.token_weights {
            if w.len() != vocab_size {
                return Err(Error::Shape {
                    what: "token weights".into(),
                    expected: vocab_size,
                    actual: w.len(),
                });
            }
        }
        if let Some(skip) = &self.example_skip {
            if !(0.0..=1.0).contains(&skip.keep_prob) {
                return Err(Error::Config(format!(
                    "skip keep probability must lie in [0, 1], got {}",
                    skip.keep_prob
                )));
            }
            if skip.token as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: skip.token,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Epoch-mean training objective for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub layer: usize,
    /// 1-based.
    pub epoch: usize,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub translators: TranslatorSet,
    pub log: Vec<EpochLog>,
}

/// Trains translators for layers `1..L-1` (or all layers when configured)
/// and assigns the identity to the rest.
pub fn train_translators(dump: &ModelDump, config: &TrainConfig) -> Result<TrainOutput> {
    train_inner(dump, config, None)
}

/// Like [`train_translators`] with `token`'s contribution scaled by `factor`.
///
/// [`MaskMode::Weight`] scales the token's KL term; [`MaskMode::Skip`]
/// keeps examples whose target is `token` with probability `factor`.
pub fn train_masked_translators(
    dump: &ModelDump,
    config: &TrainConfig,
    token: u32,
    factor: f64,
    mode: MaskMode,
) -> Result<TrainOutput> {
    let mut config = config.clone();
    match mode {
        MaskMode::Weight => {
            let base = config
                .token_weights
                .take()
                .unwrap_or_else(|| TokenWeights::ones(dump.vocab_size));
            if token as usize >= base.len() {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab_size: base.len(),
                });
            }
            let mut w = base.as_slice().to_vec();
            w[token as usize] *= factor;
            config.token_weights = Some(TokenWeights::from_vec(w)?);
        }
        MaskMode::Skip => {
            config.example_skip = Some(ExampleSkip {
                token,
                keep_prob: factor,
            });
        }
    }
    train_inner(dump, &config, Some(MaskInfo { token, factor, mode }))
}

struct LayerData<'a> {
    dump: &'a ModelDump,
    norm: NormSpec,
    unembedding: Matrix,
}

impl LayerData<'_> {
    fn target_probs(&self, n: usize) -> Vec<f64> {
        numerics::softmax_unchecked(&self.dump.final_logits_f64(n, &self.norm, &self.unembedding))
    }
}

fn train_inner(dump: &ModelDump, config: &TrainConfig, mask: Option<MaskInfo>) -> Result<TrainOutput> {
    config.validate(dump.vocab_size)?;
    let data = LayerData {
        dump,
        norm: dump.norm_spec()?,
        unembedding: dump.unembedding_matrix(),
    };
    let weights = config
        .token_weights
        .clone()
        .unwrap_or_else(|| TokenWeights::ones(dump.vocab_size));
    let num_layers = dump.num_layers;
    let trained: Vec<bool> = (0..num_layers)
        .map(|l| l + 1 < num_layers || config.train_final_layer)
        .collect();

    let jobs = config.exec.map(0..num_layers, |l| {
        if trained[l] {
            train_layer(&data, l, config, &weights)
        } else {
            Ok((Translator::identity(dump.hidden_dim), Vec::new()))
        }
    });

    let mut translators = Vec::with_capacity(num_layers);
    let mut log = Vec::new();
    for job in jobs {
        let (t, entries) = job?;
        translators.push(t);
        log.extend(entries);
    }
    let final_mean_kl = config
        .exec
        .map(0..num_layers, |l| mean_kl_inner(&data, l, &translators[l]));

    let metadata = TrainingMetadata {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        optimizer: config.optimizer.describe(),
        init: config.init.describe(),
        seed: config.seed,
        mask,
        trained,
        final_mean_kl,
        provenance: Default::default(),
    };
    Ok(TrainOutput {
        translators: TranslatorSet::new(translators, metadata)?,
        log,
    })
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn train_layer(
    data: &LayerData<'_>,
    layer: usize,
    config: &TrainConfig,
    weights: &TokenWeights,
) -> Result<(Translator, Vec<EpochLog>)> {
    let dump = data.dump;
    let d = dump.hidden_dim;
    let n = dump.num_examples;
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(config.seed, layer));
    let mut skip_rng = ChaCha8Rng::seed_from_u64(layer_seed(config.seed ^ SKIP_STREAM, layer));

    // Parameters laid out as [A row-major | b].
    let mut params = vec![0.0; d * d + d];
    for i in 0..d {
        params[i * d + i] = 1.0;
    }
    if let Init::Random { scale } = config.init {
        for v in &mut params[..d * d] {
            let noise: f64 = rng.sample(StandardNormal);
            *v += scale * noise;
        }
    }

    let inputs: Vec<Vec<f64>> = (0..n).map(|i| widen(dump.hidden(i, layer))).collect();
    let targets: Vec<Vec<f64>> = (0..n).map(|i| data.target_probs(i)).collect();

    let mut opt = OptimizerState::new(config.optimizer, params.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            for &i in batch {
                if let Some(skip) = &config.example_skip {
                    if dump.target_tokens[i] == skip.token && skip_rng.random::<f64>() >= skip.keep_prob {
                        continue;
                    }
                }
                let x = affine(&params, d, &inputs[i]);
                let (loss, grad_x) = loss_and_input_grad(&targets[i], &x, &data.norm, &data.unembedding, weights);
                batch_loss += loss;
                let (ga, gb) = grad.split_at_mut(d * d);
                accumulate_outer(ga, &grad_x, &inputs[i]);
                for (g, gx) in gb.iter_mut().zip(&grad_x) {
                    *g += gx;
                }
                used += 1;
            }
            if used == 0 {
                continue;
            }
            step += 1;
            let scale = 1.0 / used as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    layer: layer + 1,
                    epoch: epoch + 1,
                    step,
                    detail: format!("non-finite loss or gradient (batch loss {batch_loss})"),
                });
            }
            opt.step(&mut params, &grad, config.learning_rate);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    layer: layer + 1,
                    epoch: epoch + 1,
                    step,
                    detail: "non-finite translator parameters".into(),
                });
            }
            epoch_loss += batch_loss;
            epoch_count += used;
        }
        if epoch_count > 0 {
            log.push(EpochLog {
                layer: layer + 1,
                epoch: epoch + 1,
                mean_kl: epoch_loss / epoch_count as f64,
            });
        }
    }

    let b = params.split_off(d * d);
    let translator = Translator::new(Matrix::from_vec(d, d, params)?, b)?;
    Ok((translator, log))
}

fn affine(params: &[f64], d: usize, h: &[f64]) -> Vec<f64> {
    let (a, b) = params.split_at(d * d);
    a.chunks_exact(d)
        .zip(b)
        .map(|(row, bi)| numerics::dot(row, h) + bi)
        .collect()
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, len: usize) -> Self {
        let moments = matches!(kind, Optimizer::Adam { .. });
        Self {
            kind,
            m: if moments { vec![0.0; len] } else { Vec::new() },
            v: if moments { vec![0.0; len] } else { Vec::new() },
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Mean unweighted KL(final ‖ tuned lens) over the dump at 0-based `layer`.
pub fn mean_kl(dump: &ModelDump, layer: usize, translator: &Translator) -> Result<f64> {
    if layer >= dump.num_layers {
        return Err(Error::Config(format!(
            "layer {} out of range for {} layers",
            layer + 1,
            dump.num_layers
        )));
    }
    if translator.dim() != dump.hidden_dim {
        return Err(Error::Shape {
            what: "translator".into(),
            expected: dump.hidden_dim,
            actual: translator.dim(),
        });
    }
    let data = LayerData {
        dump,
        norm: dump.norm_spec()?,
        unembedding: dump.unembedding_matrix(),
    };
    Ok(mean_kl_inner(&data, layer, translator))
}

fn mean_kl_inner(data: &LayerData<'_>, layer: usize, translator: &Translator) -> f64 {
    let dump = data.dump;
    if dump.num_examples == 0 {
        return 0.0;
    }
    let total: f64 = (0..dump.num_examples)
        .map(|i| {
            let p = data.target_probs(i);
            let x = translator.apply(&widen(dump.hidden(i, layer)));
            let z = data
                .unembedding
                .matvec_unchecked(&numerics::apply_norm_unchecked(&x, &data.norm));
            numerics::weighted_kl(&p, &numerics::softmax_unchecked(&z), None)
        })
        .sum();
    total / dump.num_examples as f64
}
