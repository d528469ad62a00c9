// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model dumps: a directory holding `manifest.json` plus raw tensor files.
//!
//! Tensors are headerless little-endian `float32`, row-major, with shapes
//! recorded only in the manifest. Token ids are little-endian `uint32`.
//! Labels are JSON lines, one object of string values per example.
//!
//! Hidden states are the residual stream after each block, before the
//! final norm, at the last prompt position. Layer `L` passed through the
//! logit lens must therefore reproduce the stored final logits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bytes_to_f32, bytes_to_u32, f32_to_bytes, u32_to_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, NormKind, NormSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Max abs difference tolerated between the stored final logits and the
/// logit lens applied to the last layer.
pub const IDENTITY_TOLERANCE: f64 = 1e-4;

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormManifest {
    pub kind: NormKind,
    pub eps: f64,
    pub gamma_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub norm: NormManifest,
    pub unembedding_file: String,
    pub hidden_states_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_logits_file: Option<String>,
    pub target_tokens_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
    pub num_examples: usize,
}

/// Final-norm parameters exactly as stored (float32 gamma/beta).
#[derive(Debug, Clone, PartialEq)]
pub struct StoredNorm {
    pub kind: NormKind,
    pub eps: f64,
    pub gamma: Vec<f32>,
    pub beta: Option<Vec<f32>>,
}

impl StoredNorm {
    pub fn to_spec(&self) -> Result<NormSpec> {
        NormSpec::new(self.kind, self.eps, widen(&self.gamma), self.beta.as_deref().map(widen))?.validated_for_dump()
    }
}

pub(crate) fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// In-memory contents of a dump directory.
///
/// Tensors keep their float32 storage so that writing a loaded dump back
/// out is bitwise identical; consumers widen to `f64` before arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDump {
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_examples: usize,
    pub norm: StoredNorm,
    /// `[vocab_size, hidden_dim]`
    pub unembedding: Vec<f32>,
    /// `[num_examples, num_layers, hidden_dim]`
    pub hidden_states: Vec<f32>,
    /// `[num_examples, vocab_size]`
    pub final_logits: Option<Vec<f32>>,
    pub target_tokens: Vec<u32>,
    pub labels: Option<Vec<Labels>>,
}

/// One failed invariant, as reported by `validate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

impl ModelDump {
    /// Checks every tensor length against the declared shape. Invariants
    /// that involve arithmetic are left to [`ModelDump::check_invariants`].
    pub fn check_shapes(&self) -> Result<()> {
        let (n, l, d, v) = (self.num_examples, self.num_layers, self.hidden_dim, self.vocab_size);
        if l == 0 || d == 0 || v == 0 {
            return Err(Error::dump(
                "manifest",
                format!("num_layers, hidden_dim and vocab_size must be positive (got {l}, {d}, {v})"),
            ));
        }
        expect_len("norm.gamma_file", self.norm.gamma.len(), d, &[d])?;
        match (self.norm.kind, &self.norm.beta) {
            (NormKind::LayerNorm, Some(b)) => expect_len("norm.beta_file", b.len(), d, &[d])?,
            (NormKind::LayerNorm, None) => {
                return Err(Error::dump("norm.beta_file", "layernorm requires a beta file"));
            }
            (NormKind::RmsNorm, Some(_)) => {
                return Err(Error::dump("norm.beta_file", "rmsnorm must not declare a beta file"));
            }
            (NormKind::RmsNorm, None) => {}
        }
        if !(self.norm.eps > 0.0 && self.norm.eps.is_finite()) {
            return Err(Error::dump(
                "norm.eps",
                format!("must be finite and > 0, got {}", self.norm.eps),
            ));
        }
        expect_len("unembedding_file", self.unembedding.len(), v * d, &[v, d])?;
        expect_len("hidden_states_file", self.hidden_states.len(), n * l * d, &[n, l, d])?;
        if let Some(fl) = &self.final_logits {
            expect_len("final_logits_file", fl.len(), n * v, &[n, v])?;
        }
        if self.target_tokens.len() != n {
            return Err(Error::dump(
                "target_tokens_file",
                format!("expected {n} token ids, found {}", self.target_tokens.len()),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::dump(
                    "labels_file",
                    format!("expected {n} label lines, found {}", labels.len()),
                ));
            }
        }
        expect_finite("norm.gamma_file", &self.norm.gamma)?;
        if let Some(b) = &self.norm.beta {
            expect_finite("norm.beta_file", b)?;
        }
        expect_finite("unembedding_file", &self.unembedding)?;
        expect_finite("hidden_states_file", &self.hidden_states)?;
        if let Some(fl) = &self.final_logits {
            expect_finite("final_logits_file", fl)?;
        }
        Ok(())
    }

    /// Runs the arithmetic invariants and returns every violation found.
    /// Assumes [`ModelDump::check_shapes`] passed.
    pub fn check_invariants(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let v = self.vocab_size;
        if let Some((i, t)) = self.target_tokens.iter().enumerate().find(|(_, &t)| t as usize >= v) {
            out.push(Violation {
                invariant: "target_tokens_in_vocab",
                detail: format!("example {i}: token {t} >= vocab_size {v}"),
            });
            return out;
        }
        let norm = match self.norm.to_spec() {
            Ok(n) => n,
            Err(e) => {
                out.push(Violation {
                    invariant: "norm_spec",
                    detail: e.to_string(),
                });
                return out;
            }
        };
        let unembedding = self.unembedding_matrix();
        let last = self.num_layers - 1;

        let mut max_diff = 0.0f64;
        let mut worst = (0usize, 0usize);
        let mut first_bad_target: Option<(usize, u32, u32)> = None;
        for n in 0..self.num_examples {
            let h = widen(self.hidden(n, last));
            let lens = unembedding.matvec_unchecked(&numerics::apply_norm_unchecked(&h, &norm));
            let reference = match &self.final_logits {
                Some(fl) => {
                    let stored = widen(&fl[n * v..(n + 1) * v]);
                    for (i, (a, b)) in lens.iter().zip(&stored).enumerate() {
                        let diff = (a - b).abs();
                        if diff > max_diff {
                            max_diff = diff;
                            worst = (n, i);
                        }
                    }
                    stored
                }
                None => lens,
            };
            let top = numerics::top1(&reference);
            if top != self.target_tokens[n] && first_bad_target.is_none() {
                first_bad_target = Some((n, self.target_tokens[n], top));
            }
        }
        if self.final_logits.is_some() && max_diff > IDENTITY_TOLERANCE {
            out.push(Violation {
                invariant: "final_layer_identity",
                detail: format!(
                    "logit lens on layer {} differs from final_logits by max abs diff {max_diff:.6e} \
                     (example {}, token {}; tolerance {IDENTITY_TOLERANCE:e})",
                    self.num_layers, worst.0, worst.1
                ),
            });
        }
        if let Some((n, stored, top)) = first_bad_target {
            let count = (0..self.num_examples)
                .filter(|&i| {
                    let r = self.reference_logits(i, &norm, &unembedding);
                    numerics::top1(&r) != self.target_tokens[i]
                })
                .count();
            out.push(Violation {
                invariant: "target_is_final_top1",
                detail: format!(
                    "{count} example(s) disagree; first is example {n}: target_tokens has {stored}, top-1 of final logits is {top}"
                ),
            });
        }
        out
    }

    fn reference_logits(&self, n: usize, norm: &NormSpec, unembedding: &Matrix) -> Vec<f64> {
        let v = self.vocab_size;
        match &self.final_logits {
            Some(fl) => widen(&fl[n * v..(n + 1) * v]),
            None => {
                let h = widen(self.hidden(n, self.num_layers - 1));
                unembedding.matvec_unchecked(&numerics::apply_norm_unchecked(&h, norm))
            }
        }
    }

    /// Hidden state of example `n` after block `layer` (0-based).
    pub fn hidden(&self, n: usize, layer: usize) -> &[f32] {
        let d = self.hidden_dim;
        let start = (n * self.num_layers + layer) * d;
        &self.hidden_states[start..start + d]
    }

    pub fn unembedding_matrix(&self) -> Matrix {
        Matrix::from_vec(self.vocab_size, self.hidden_dim, widen(&self.unembedding))
            .expect("unembedding shape checked on construction")
    }

    pub fn norm_spec(&self) -> Result<NormSpec> {
        self.norm.to_spec()
    }

    /// Reference (final) logits for example `n`, recomputed from the last
    /// layer when the dump does not store them.
    pub fn final_logits_f64(&self, n: usize, norm: &NormSpec, unembedding: &Matrix) -> Vec<f64> {
        self.reference_logits(n, norm, unembedding)
    }

    pub fn label(&self, n: usize, key: &str) -> Option<&str> {
        self.labels.as_ref()?.get(n)?.get(key).map(String::as_str)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model_name: self.model_name.clone(),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            vocab_size: self.vocab_size,
            norm: NormManifest {
                kind: self.norm.kind,
                eps: self.norm.eps,
                gamma_file: "norm_gamma.f32".into(),
                beta_file: self.norm.beta.as_ref().map(|_| "norm_beta.f32".into()),
            },
            unembedding_file: "unembedding.f32".into(),
            hidden_states_file: "hidden_states.f32".into(),
            final_logits_file: self.final_logits.as_ref().map(|_| "final_logits.f32".into()),
            target_tokens_file: "target_tokens.u32".into(),
            labels_file: self.labels.as_ref().map(|_| "labels.jsonl".into()),
            num_examples: self.num_examples,
        }
    }
}

fn expect_len(field: &str, actual: usize, expected: usize, shape: &[usize]) -> Result<()> {
    if actual == expected {
        return Ok(());
    }
    Err(Error::dump(
        field,
        format!("shape {shape:?} needs {expected} values, found {actual}"),
    ))
}

fn expect_finite(field: &str, xs: &[f32]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::dump(field, format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Reads a dump and checks shapes and invariants.
pub fn read_dump(dir: impl AsRef<Path>) -> Result<ModelDump> {
    let dump = read_dump_unchecked(dir)?;
    if let Some(v) = dump.check_invariants().into_iter().next() {
        return Err(Error::Invariant {
            invariant: v.invariant.to_string(),
            detail: v.detail,
        });
    }
    Ok(dump)
}

/// Reads a dump, checking file presence, sizes and shapes but not the
/// arithmetic invariants.
pub fn read_dump_unchecked(dir: impl AsRef<Path>) -> Result<ModelDump> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::dump("manifest.json", format!("cannot read {}: {e}", manifest_path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, "manifest", e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::dump(
            "format_version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }

    let read_f32 = |field: &str, name: &str| -> Result<Vec<f32>> {
        let bytes = read_file(dir, field, name)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::dump(
                field,
                format!("{} bytes is not a whole number of float32 values", bytes.len()),
            ));
        }
        Ok(bytes_to_f32(&bytes))
    };

    let gamma = read_f32("norm.gamma_file", &m.norm.gamma_file)?;
    let beta = m
        .norm
        .beta_file
        .as_deref()
        .map(|f| read_f32("norm.beta_file", f))
        .transpose()?;
    let unembedding = read_f32("unembedding_file", &m.unembedding_file)?;
    let hidden_states = read_f32("hidden_states_file", &m.hidden_states_file)?;
    let final_logits = m
        .final_logits_file
        .as_deref()
        .map(|f| read_f32("final_logits_file", f))
        .transpose()?;
    let tok_bytes = read_file(dir, "target_tokens_file", &m.target_tokens_file)?;
    if tok_bytes.len() % 4 != 0 {
        return Err(Error::dump(
            "target_tokens_file",
            format!("{} bytes is not a whole number of uint32 values", tok_bytes.len()),
        ));
    }
    let target_tokens = bytes_to_u32(&tok_bytes);
    let labels = m.labels_file.as_deref().map(|f| read_labels(dir, f)).transpose()?;

    let dump = ModelDump {
        model_name: m.model_name,
        num_layers: m.num_layers,
        hidden_dim: m.hidden_dim,
        vocab_size: m.vocab_size,
        num_examples: m.num_examples,
        norm: StoredNorm {
            kind: m.norm.kind,
            eps: m.norm.eps,
            gamma,
            beta,
        },
        unembedding,
        hidden_states,
        final_logits,
        target_tokens,
        labels,
    };
    dump.check_shapes()?;
    Ok(dump)
}

fn read_file(dir: &Path, field: &str, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::dump(field, format!("cannot read {}: {e}", path.display())))
}

fn read_labels(dir: &Path, name: &str) -> Result<Vec<Labels>> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::dump("labels_file", format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<Labels>(line).map_err(|e| {
                Error::dump(
                    "labels_file",
                    format!("line {}: expected an object of string values: {e}", i + 1),
                )
            })
        })
        .collect()
}

/// Writes `dump` into `dir` using canonical file names.
pub fn write_dump(dump: &ModelDump, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dump.check_shapes()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = dump.manifest();
    write_atomic(&dir.join(&m.norm.gamma_file), &f32_to_bytes(&dump.norm.gamma))?;
    if let (Some(name), Some(beta)) = (&m.norm.beta_file, &dump.norm.beta) {
        write_atomic(&dir.join(name), &f32_to_bytes(beta))?;
    }
    write_atomic(&dir.join(&m.unembedding_file), &f32_to_bytes(&dump.unembedding))?;
    write_atomic(&dir.join(&m.hidden_states_file), &f32_to_bytes(&dump.hidden_states))?;
    if let (Some(name), Some(fl)) = (&m.final_logits_file, &dump.final_logits) {
        write_atomic(&dir.join(name), &f32_to_bytes(fl))?;
    }
    write_atomic(&dir.join(&m.target_tokens_file), &u32_to_bytes(&dump.target_tokens))?;
    if let (Some(name), Some(labels)) = (&m.labels_file, &dump.labels) {
        let mut text = String::new();
        for l in labels {
            text.push_str(&serde_json::to_string(l).expect("string map serializes"));
            text.push('\n');
        }
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    let mut manifest = serde_json::to_string_pretty(&m).expect("manifest serializes");
    manifest.push('\n');
    write_atomic(&dir.join("manifest.json"), manifest.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelDump {
        // N=1, L=2, d=2, |V|=3, W_U = [[1,0],[0,1],[1,1]], layernorm gamma=1 beta=0.
        let norm = StoredNorm {
            kind: NormKind::LayerNorm,
            eps: 1e-5,
            gamma: vec![1.0, 1.0],
            beta: Some(vec![0.0, 0.0]),
        };
        let unembedding = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let hidden_states = vec![0.5, -0.5, 2.0, 1.0];
        let spec = norm.to_spec().unwrap();
        let w = Matrix::from_vec(3, 2, widen(&unembedding)).unwrap();
        let logits = w.matvec(&numerics::apply_norm(&[2.0, 1.0], &spec).unwrap()).unwrap();
        ModelDump {
            model_name: "tiny".into(),
            num_layers: 2,
            hidden_dim: 2,
            vocab_size: 3,
            num_examples: 1,
            norm,
            unembedding,
            hidden_states,
            target_tokens: vec![numerics::top1(&logits)],
            final_logits: Some(logits.iter().map(|&x| x as f32).collect()),
            labels: Some(vec![Labels::from([("pos".to_string(), "NOUN".to_string())])]),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let dump = tiny();
        write_dump(&dump, dir.path()).unwrap();
        let back = read_dump(dir.path()).unwrap();
        assert_eq!(back, dump);
        let first = std::fs::read(dir.path().join("hidden_states.f32")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dump(&back, dir2.path()).unwrap();
        for f in ["manifest.json", "hidden_states.f32", "final_logits.f32", "labels.jsonl"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(bytes_to_f32(&first), dump.hidden_states);
    }

    #[test]
    fn short_hidden_states_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut dump = tiny();
        dump.num_examples = 2;
        dump.num_layers = 2;
        dump.final_logits = None;
        dump.target_tokens = vec![0, 0];
        dump.labels = None;
        dump.hidden_states = vec![0.0; 8];
        write_dump(&dump, dir.path()).unwrap();
        std::fs::write(dir.path().join("hidden_states.f32"), f32_to_bytes(&[1.0, 2.0, 3.0])).unwrap();
        let err = read_dump(dir.path()).unwrap_err();
        match err {
            Error::Dump { field, .. } => assert_eq!(field, "hidden_states_file"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_target_is_an_invariant_violation() {
        let dir = tempfile::tempdir().unwrap();
        let mut dump = tiny();
        let correct = dump.target_tokens[0];
        dump.target_tokens[0] = (correct + 1) % 3;
        write_dump(&dump, dir.path()).unwrap();
        match read_dump(dir.path()).unwrap_err() {
            Error::Invariant { invariant, .. } => assert_eq!(invariant, "target_is_final_top1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn perturbed_final_logits_report_max_diff() {
        let mut dump = tiny();
        dump.final_logits.as_mut().unwrap()[1] += 0.01;
        let v = dump.check_invariants();
        let identity = v.iter().find(|v| v.invariant == "final_layer_identity").unwrap();
        assert!(identity.detail.contains("max abs diff"));
    }

    #[test]
    fn missing_file_names_field() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&tiny(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("unembedding.f32")).unwrap();
        match read_dump(dir.path()).unwrap_err() {
            Error::Dump { field, .. } => assert_eq!(field, "unembedding_file"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_string_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(&tiny(), dir.path()).unwrap();
        std::fs::write(dir.path().join("labels.jsonl"), "{\"fact_len\": 3}\n").unwrap();
        match read_dump(dir.path()).unwrap_err() {
            Error::Dump { field, .. } => assert_eq!(field, "labels_file"),
            other => panic!("unexpected {other}"),
        }
    }
}
