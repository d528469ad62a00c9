// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent reference implementations used as test oracles.
//!
//! Everything here is written the slow, obvious way and shares no code
//! with the library beyond its public data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

use depthlens::io::dump::{Labels, ModelDump, StoredNorm};
use depthlens::io::freq::FrequencyTable;
use depthlens::io::translators::{Translator, TranslatorSet};
use depthlens::numerics::{Matrix, NormKind};
use depthlens::report::{Cell, ReportTable};
use depthlens::synthetic::{toy_dump, ToySpec};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn naive_norm(h: &[f64], norm: &StoredNorm) -> Vec<f64> {
    let d = h.len() as f64;
    let eps = norm.eps;
    match norm.kind {
        NormKind::LayerNorm => {
            let mean = h.iter().sum::<f64>() / d;
            let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let beta = norm.beta.as_ref().unwrap();
            (0..h.len())
                .map(|i| norm.gamma[i] as f64 * (h[i] - mean) / (var + eps).sqrt() + beta[i] as f64)
                .collect()
        }
        NormKind::RmsNorm => {
            let ms = h.iter().map(|x| x * x).sum::<f64>() / d;
            (0..h.len())
                .map(|i| norm.gamma[i] as f64 * h[i] / (ms + eps).sqrt())
                .collect()
        }
    }
}

pub fn naive_logits(dump: &ModelDump, translators: Option<&TranslatorSet>, n: usize, l: usize) -> Vec<f64> {
    let d = dump.hidden_dim;
    let h: Vec<f64> = dump.hidden(n, l).iter().map(|&v| v as f64).collect();
    let x = match translators {
        None => h,
        Some(set) => {
            let t = set.layer(l);
            (0..d)
                .map(|i| {
                    let mut s = t.b[i];
                    for (j, hj) in h.iter().enumerate() {
                        s += t.a.get(i, j) * hj;
                    }
                    s
                })
                .collect()
        }
    };
    let y = naive_norm(&x, &dump.norm);
    (0..dump.vocab_size)
        .map(|v| (0..d).map(|j| dump.unembedding[v * d + j] as f64 * y[j]).sum())
        .collect()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Rank by a stable descending sort: equal logits keep id order.
pub fn sort_rank(z: &[f64], token: usize) -> usize {
    let mut ids: Vec<usize> = (0..z.len()).collect();
    ids.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap());
    ids.iter().position(|&i| i == token).unwrap() + 1
}

pub fn sort_top1(z: &[f64]) -> u32 {
    let mut ids: Vec<usize> = (0..z.len()).collect();
    ids.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap());
    ids[0] as u32
}

/// Token → bucket index by sorting the whole vocabulary.
pub fn naive_buckets(freq: &FrequencyTable, boundaries: &[usize], vocab: usize) -> Vec<usize> {
    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    ids.sort_by(|&a, &b| freq.count(b).cmp(&freq.count(a)).then(a.cmp(&b)));
    let mut out = vec![boundaries.len(); vocab];
    for (i, &t) in ids.iter().enumerate() {
        if freq.count(t) == 0 {
            continue;
        }
        let rank = i + 1;
        out[t as usize] = boundaries.iter().filter(|&&b| rank > b).count();
    }
    out
}

pub fn bucket_names(boundaries: &[usize]) -> Vec<String> {
    let mut names = Vec::new();
    let mut lo = 1;
    for &b in boundaries {
        names.push(format!("Top{lo}-{b}"));
        lo = b + 1;
    }
    names.push(format!("Top{}+", boundaries.last().unwrap()));
    names
}

pub struct Oracle<'a> {
    pub dump: &'a ModelDump,
    pub translators: Option<&'a TranslatorSet>,
    /// `logits[n][l]`.
    pub logits: Vec<Vec<Vec<f64>>>,
}

impl<'a> Oracle<'a> {
    pub fn new(dump: &'a ModelDump, translators: Option<&'a TranslatorSet>) -> Self {
        let logits = (0..dump.num_examples)
            .map(|n| {
                (0..dump.num_layers)
                    .map(|l| naive_logits(dump, translators, n, l))
                    .collect()
            })
            .collect();
        Self {
            dump,
            translators,
            logits,
        }
    }

    fn layers(&self) -> usize {
        self.dump.num_layers
    }

    pub fn buckets(&self, freq: &FrequencyTable, boundaries: &[usize]) -> ReportTable {
        let vocab = self.dump.vocab_size;
        let of = naive_buckets(freq, boundaries, vocab);
        let names = bucket_names(boundaries);
        let n = self.dump.num_examples;
        let mut t = ReportTable::new("buckets", &["layer", "bucket", "fraction"]);
        for l in 0..self.layers() {
            for (b, name) in names.iter().enumerate() {
                let hits = (0..n)
                    .filter(|&i| of[sort_top1(&self.logits[i][l]) as usize] == b)
                    .count();
                t.push(vec![
                    Cell::Int(l as i64 + 1),
                    Cell::Text(name.clone()),
                    Cell::Float(hits as f64 / n as f64),
                ]);
            }
        }
        t
    }

    pub fn flips(&self, freq: &FrequencyTable, boundaries: &[usize]) -> ReportTable {
        let of = naive_buckets(freq, boundaries, self.dump.vocab_size);
        let names = bucket_names(boundaries);
        let last = self.layers() - 1;
        let mut t = ReportTable::new("flips", &["layer", "bucket", "flip_rate", "count"]);
        for l in 0..self.layers() {
            for (b, name) in names.iter().enumerate() {
                let mut members = 0;
                let mut flips = 0;
                for ex in &self.logits {
                    let top = sort_top1(&ex[l]);
                    if of[top as usize] == b {
                        members += 1;
                        if top != sort_top1(&ex[last]) {
                            flips += 1;
                        }
                    }
                }
                let rate = if members == 0 {
                    Cell::Absent
                } else {
                    Cell::Float(flips as f64 / members as f64)
                };
                t.push(vec![
                    Cell::Int(l as i64 + 1),
                    Cell::Text(name.clone()),
                    rate,
                    Cell::Int(members),
                ]);
            }
        }
        t
    }

    pub fn onset(&self, key: &str, thresholds: &[usize], exclude: &[&str]) -> ReportTable {
        let labels = self.dump.labels.as_ref().unwrap();
        let mut categories: Vec<&str> = labels.iter().map(|m| m[key].as_str()).collect();
        categories.sort();
        categories.dedup();
        let mut t = ReportTable::new(
            "onset",
            &["category", "threshold", "mean_layer", "count", "never_fraction"],
        );
        for c in categories.into_iter().filter(|c| !exclude.contains(c)) {
            let members: Vec<usize> = (0..self.dump.num_examples).filter(|&n| labels[n][key] == c).collect();
            for &k in thresholds {
                let mut crossed = Vec::new();
                for &n in &members {
                    let target = self.dump.target_tokens[n] as usize;
                    for l in 0..self.layers() {
                        if sort_rank(&self.logits[n][l], target) <= k {
                            crossed.push((l + 1) as f64);
                            break;
                        }
                    }
                }
                let mean = if crossed.is_empty() {
                    Cell::Absent
                } else {
                    Cell::Float(crossed.iter().sum::<f64>() / crossed.len() as f64)
                };
                t.push(vec![
                    Cell::Text(c.to_string()),
                    Cell::Int(k as i64),
                    mean,
                    Cell::Int(crossed.len() as i64),
                    Cell::Float((members.len() - crossed.len()) as f64 / members.len() as f64),
                ]);
            }
        }
        t
    }

    pub fn meanrank(&self, options: &[u32]) -> ReportTable {
        let n = self.dump.num_examples as f64;
        let mut t = ReportTable::new("meanrank", &["layer", "option", "mean_rank"]);
        for l in 0..self.layers() {
            for &o in options {
                let s: f64 = self.logits.iter().map(|ex| sort_rank(&ex[l], o as usize) as f64).sum();
                t.push(vec![Cell::Int(l as i64 + 1), Cell::Int(o as i64), Cell::Float(s / n)]);
            }
        }
        t
    }

    /// Mean softmax per layer and token under this oracle's lens.
    pub fn mean_probs(&self) -> Vec<Vec<f64>> {
        let n = self.dump.num_examples as f64;
        (0..self.layers())
            .map(|l| {
                (0..self.dump.vocab_size)
                    .map(|v| self.logits.iter().map(|ex| naive_softmax(&ex[l])[v]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }
}

/// Expected probmass table for the given lens series (name, oracle).
pub fn probmass_oracle(series: &[(&str, &Oracle<'_>)], freq: &FrequencyTable, top: Option<usize>) -> ReportTable {
    let dump = series[0].1.dump;
    let vocab = dump.vocab_size;
    let mut order: Vec<u32> = (0..vocab as u32).collect();
    order.sort_by(|&a, &b| freq.count(b).cmp(&freq.count(a)).then(a.cmp(&b)));
    let keep = top.unwrap_or(vocab).min(vocab);
    let mut t = ReportTable::new("probmass", &["freq_rank", "token", "layer", "lens", "mean_prob"]);
    let mut emit = |lens: &str, layer: usize, means: &[f64]| {
        for (i, &tok) in order[..keep].iter().enumerate() {
            t.push(vec![
                Cell::Int(i as i64 + 1),
                Cell::Int(tok as i64),
                Cell::Int(layer as i64),
                Cell::Text(lens.into()),
                Cell::Float(means[tok as usize]),
            ]);
        }
    };
    for (name, oracle) in series {
        for (l, m) in oracle.mean_probs().iter().enumerate() {
            emit(name, l + 1, m);
        }
    }
    let logit = Oracle::new(dump, None);
    let final_means = logit.mean_probs().pop().unwrap();
    emit("final", dump.num_layers, &final_means);
    t
}

/// Integers and text must match exactly, floats within `tol`.
pub fn assert_tables_match(actual: &ReportTable, expected: &ReportTable, tol: f64) {
    assert_eq!(actual.name, expected.name);
    assert_eq!(actual.columns, expected.columns);
    assert_eq!(actual.rows.len(), expected.rows.len(), "row count of {}", actual.name);
    for (i, (a, e)) in actual.rows.iter().zip(&expected.rows).enumerate() {
        for (j, (ca, ce)) in a.iter().zip(e).enumerate() {
            let ok = match (ca, ce) {
                (Cell::Float(x), Cell::Float(y)) => (x - y).abs() <= tol,
                _ => ca == ce,
            };
            assert!(
                ok,
                "{} row {i} column {}: {ca:?} vs {ce:?}",
                actual.name, actual.columns[j]
            );
        }
    }
}

/// A frequency table over `vocab` with random counts, some zero.
pub fn random_freq(rng: &mut impl rand::Rng, vocab: usize) -> FrequencyTable {
    let mut t = FrequencyTable::from_counts((0..vocab as u32).map(|v| (v, rng.random_range(0..6u64))));
    if t.total() == 0 {
        t.add(0, 1);
    }
    t
}

/// One-dimensional, two-token problem: layer-1 inputs `h0` map through
/// `(A, b)` and must match the distribution produced by layer-2 states `h1`.
pub struct ScalarCase {
    pub h0: Vec<f32>,
    pub h1: Vec<f32>,
    pub w: [f32; 2],
}

impl ScalarCase {
    pub fn new(h0: f64, z: [f64; 2]) -> Self {
        // Last-layer state whose logit gap matches `z`'s, clamped to what
        // the saturating norm can express.
        let gap = (z[0] - z[1]).clamp(-2.0, 2.0);
        let w = [1.5f32, -1.0];
        // norm(x) = x / sqrt(x² + 1) for d = 1, gamma = 1, eps = 1.
        let y = gap / 2.5;
        let x = y / (1.0 - y * y).sqrt();
        Self {
            h0: vec![h0 as f32],
            h1: vec![x as f32],
            w,
        }
    }

    pub fn multi(h0: &[f64], h1: &[f64]) -> Self {
        Self {
            h0: h0.iter().map(|&v| v as f32).collect(),
            h1: h1.iter().map(|&v| v as f32).collect(),
            w: [1.5, -1.0],
        }
    }

    fn norm() -> StoredNorm {
        StoredNorm {
            kind: NormKind::RmsNorm,
            eps: 1.0,
            gamma: vec![1.0],
            beta: None,
        }
    }

    fn logits(&self, x: f64) -> [f64; 2] {
        let y = x / (x * x + 1.0).sqrt();
        [self.w[0] as f64 * y, self.w[1] as f64 * y]
    }

    pub fn dump(&self) -> ModelDump {
        let n = self.h0.len();
        let mut hidden = Vec::new();
        let mut final_logits = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            hidden.push(self.h0[i]);
            hidden.push(self.h1[i]);
            let z = self.logits(self.h1[i] as f64).map(|v| v as f32);
            targets.push(if z[1] > z[0] { 1 } else { 0 });
            final_logits.extend(z);
        }
        ModelDump {
            model_name: "scalar".into(),
            num_layers: 2,
            hidden_dim: 1,
            vocab_size: 2,
            num_examples: n,
            norm: Self::norm(),
            unembedding: self.w.to_vec(),
            hidden_states: hidden,
            final_logits: Some(final_logits),
            target_tokens: targets,
            labels: None,
        }
    }

    /// Mean KL of the layer-1 lens under translator `(a, b)`.
    pub fn loss(&self, a: f64, b: f64) -> f64 {
        let n = self.h0.len();
        let mut total = 0.0;
        for i in 0..n {
            let p = naive_softmax(&self.logits(self.h1[i] as f64).map(|v| v as f32 as f64));
            let q = naive_softmax(&self.logits(a * self.h0[i] as f64 + b));
            total += p
                .iter()
                .zip(&q)
                .map(|(pi, qi)| if *pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
                .sum::<f64>();
        }
        total / n as f64
    }

    /// Best loss on a `points × points` grid over `[-range, range]²`.
    pub fn grid_minimum(&self, points: usize, range: f64) -> (f64, f64, f64) {
        let step = 2.0 * range / (points - 1) as f64;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..points {
            let a = -range + i as f64 * step;
            for j in 0..points {
                let b = -range + j as f64 * step;
                let l = self.loss(a, b);
                if l < best.0 {
                    best = (l, a, b);
                }
            }
        }
        best
    }
}

/// Labels cycling through `categories`, plus a constant `options` label.
pub fn cycle_labels(n: usize, key: &str, categories: &[&str]) -> Vec<Labels> {
    (0..n)
        .map(|i| BTreeMap::from([(key.to_string(), categories[i % categories.len()].to_string())]))
        .collect()
}

pub const POS_CATEGORIES: [&str; 3] = ["ADJ", "NOUN", "OTHER"];

/// Random small dump (N ≤ 8, L ≤ 3, |V| ≤ 16) with `pos` labels.
pub fn small_dump(rng: &mut ChaCha8Rng) -> ModelDump {
    let spec = ToySpec {
        examples: rng.random_range(1..=8),
        layers: rng.random_range(1..=3),
        hidden_dim: rng.random_range(2..=4),
        vocab: rng.random_range(2..=16),
        norm: if rng.random_bool(0.5) {
            NormKind::LayerNorm
        } else {
            NormKind::RmsNorm
        },
        seed: rng.random(),
        logit_scale: 1.5,
    };
    let mut dump = toy_dump(&spec);
    let labels: Vec<Labels> = (0..dump.num_examples)
        .map(|_| Labels::from([("pos".to_string(), POS_CATEGORIES[rng.random_range(0..3)].to_string())]))
        .collect();
    dump.labels = Some(labels);
    dump
}

/// Random translators on every layer but the last, which stays identity.
pub fn random_translators(rng: &mut ChaCha8Rng, dump: &ModelDump) -> TranslatorSet {
    let d = dump.hidden_dim;
    let base = TranslatorSet::identity(dump.num_layers, d);
    let ts = (0..dump.num_layers)
        .map(|l| {
            if l + 1 == dump.num_layers {
                return Translator::identity(d);
            }
            let a = (0..d * d)
                .map(|k| (k % (d + 1) == 0) as u8 as f64 + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b = (0..d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
            Translator::new(Matrix::from_vec(d, d, a).unwrap(), b).unwrap()
        })
        .collect();
    TranslatorSet::new(ts, base.metadata.clone()).unwrap()
}

pub fn options_for(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    ids.shuffle(rng);
    ids.truncate(rng.random_range(1..=vocab.min(4)));
    ids
}

pub mod grad {
    use depthlens::io::translators::Translator;
    use depthlens::lens::{lens_loss_and_grad, TokenWeights};
    use depthlens::numerics::{Matrix, NormSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub struct Instance {
        pub final_logits: Vec<f64>,
        pub h: Vec<f64>,
        pub translator: Translator,
        pub norm: NormSpec,
        pub unembedding: Matrix,
    }

    fn normals(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Random problem with `d` hidden units and `v` tokens; the norm kind
    /// alternates with `rms`.
    pub fn random_instance(rng: &mut impl Rng, d: usize, v: usize, rms: bool) -> Instance {
        let gamma: Vec<f64> = normals(rng, d, 0.3).into_iter().map(|g| 1.0 + g).collect();
        let norm = if rms {
            NormSpec::rmsnorm(1e-5, gamma).unwrap()
        } else {
            NormSpec::layernorm(1e-5, gamma, normals(rng, d, 0.2)).unwrap()
        };
        let mut a = normals(rng, d * d, 0.3);
        for i in 0..d {
            a[i * d + i] += 1.0;
        }
        Instance {
            final_logits: normals(rng, v, 1.5),
            h: normals(rng, d, 1.0),
            translator: Translator::new(Matrix::from_vec(d, d, a).unwrap(), normals(rng, d, 0.3)).unwrap(),
            norm,
            unembedding: Matrix::from_vec(v, d, normals(rng, v * d, 1.0)).unwrap(),
        }
    }

    impl Instance {
        /// Weighted KL computed from scratch, without the library's loss.
        pub fn loss_at(&self, a: &[f64], b: &[f64], w: &TokenWeights) -> f64 {
            let d = self.h.len();
            let x: Vec<f64> = (0..d)
                .map(|i| b[i] + (0..d).map(|j| a[i * d + j] * self.h[j]).sum::<f64>())
                .collect();
            let n = d as f64;
            let gamma = self.norm.gamma();
            let y: Vec<f64> = match self.norm.beta() {
                Some(beta) => {
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (0..d)
                        .map(|i| gamma[i] * (x[i] - mean) / (var + self.norm.eps()).sqrt() + beta[i])
                        .collect()
                }
                None => {
                    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
                    (0..d)
                        .map(|i| gamma[i] * x[i] / (ms + self.norm.eps()).sqrt())
                        .collect()
                }
            };
            let z: Vec<f64> = (0..self.unembedding.rows())
                .map(|v| (0..d).map(|j| self.unembedding.get(v, j) * y[j]).sum())
                .collect();
            let p = super::naive_softmax(&self.final_logits);
            let q = super::naive_softmax(&z);
            (0..p.len())
                .map(|i| w.as_slice()[i] * p[i] * (p[i].ln() - q[i].ln()))
                .sum()
        }

        /// Central differences of the loss w.r.t. `[A row-major | b]`.
        pub fn finite_differences(&self, w: &TokenWeights, step: f64) -> Vec<f64> {
            let a0 = self.translator.a.as_slice().to_vec();
            let b0 = self.translator.b.clone();
            let mut out = Vec::with_capacity(a0.len() + b0.len());
            for k in 0..a0.len() + b0.len() {
                let (mut a1, mut b1) = (a0.clone(), b0.clone());
                let (mut a2, mut b2) = (a0.clone(), b0.clone());
                if k < a0.len() {
                    a1[k] += step;
                    a2[k] -= step;
                } else {
                    b1[k - a0.len()] += step;
                    b2[k - a0.len()] -= step;
                }
                out.push((self.loss_at(&a1, &b1, w) - self.loss_at(&a2, &b2, w)) / (2.0 * step));
            }
            out
        }

        pub fn analytic(&self, w: &TokenWeights) -> Vec<f64> {
            let g = lens_loss_and_grad(
                &self.final_logits,
                &self.h,
                &self.translator,
                &self.norm,
                &self.unembedding,
                w,
            )
            .unwrap();
            let mut out = g.grad_a.as_slice().to_vec();
            out.extend(g.grad_b);
            out
        }
    }

    /// Largest elementwise `|a − f| / max(|a|, |f|, floor)`.
    pub fn max_relative_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(fd)
            .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}
