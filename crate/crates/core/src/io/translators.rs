// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer affine translators `(A_l, b_l)` and their file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"DLTS"
//! u32    format version (1)
//! u32    num_layers
//! u32    hidden_dim
//! u64    metadata length in bytes
//! [u8]   metadata, UTF-8 JSON
//! per layer: A as hidden_dim² f64 row-major, then b as hidden_dim f64
//! ```
//!
//! Parameters are kept at `f64` since that is the precision they are
//! trained at.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::{check_finite, Matrix};

const MAGIC: &[u8; 4] = b"DLTS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Translator {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl Translator {
    pub fn identity(d: usize) -> Self {
        Self {
            a: Matrix::identity(d),
            b: vec![0.0; d],
        }
    }

    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != b.len() {
            return Err(Error::Shape {
                what: format!("translator ({}x{} matrix with bias)", a.rows(), a.cols()),
                expected: a.rows(),
                actual: b.len(),
            });
        }
        check_finite("translator bias", &b)?;
        Ok(Self { a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `A·h + b`
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let mut x = self.a.matvec_unchecked(h);
        for (xi, bi) in x.iter_mut().zip(&self.b) {
            *xi += bi;
        }
        x
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Scales the masked token's term inside the KL sum.
    Weight,
    /// Skips examples whose target is the masked token with probability
    /// `1 - factor`.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskInfo {
    pub token: u32,
    pub factor: f64,
    pub mode: MaskMode,
}

/// How a translator set was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub init: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskInfo>,
    /// Per layer (index 0 is layer 1): true when optimized, false when
    /// assigned the identity.
    pub trained: Vec<bool>,
    /// Mean KL(final ‖ lens) over the dump after training, per layer.
    pub final_mean_kl: Vec<f64>,
    /// Free-form provenance (tool version, input hashes).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorSet {
    translators: Vec<Translator>,
    pub metadata: TrainingMetadata,
}

impl TranslatorSet {
    pub fn new(translators: Vec<Translator>, metadata: TrainingMetadata) -> Result<Self> {
        let Some(first) = translators.first() else {
            return Err(Error::Config("translator set needs at least one layer".into()));
        };
        let d = first.dim();
        for (l, t) in translators.iter().enumerate() {
            if t.dim() != d {
                return Err(Error::Shape {
                    what: format!("translator for layer {}", l + 1),
                    expected: d,
                    actual: t.dim(),
                });
            }
        }
        Ok(Self { translators, metadata })
    }

    /// Identity translators for every layer.
    pub fn identity(num_layers: usize, d: usize) -> Self {
        Self {
            translators: (0..num_layers).map(|_| Translator::identity(d)).collect(),
            metadata: TrainingMetadata {
                trained: vec![false; num_layers],
                ..Default::default()
            },
        }
    }

    pub fn num_layers(&self) -> usize {
        self.translators.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.translators[0].dim()
    }

    /// Translator for 0-based `layer`.
    pub fn layer(&self, layer: usize) -> &Translator {
        &self.translators[layer]
    }

    pub fn translators(&self) -> &[Translator] {
        &self.translators
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let d = self.hidden_dim();
        let mut out = Vec::with_capacity(24 + meta.len() + self.num_layers() * (d * d + d) * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in &self.translators {
            for v in t.a.as_slice().iter().chain(&t.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(path, "translator set", detail);
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let layers = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let d = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let meta_len = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let meta = r.take(meta_len).ok_or_else(|| bad("truncated metadata"))?;
        let metadata: TrainingMetadata = serde_json::from_slice(meta).map_err(|e| bad(&format!("metadata: {e}")))?;
        let expected = layers * (d * d + d) * 8;
        if r.remaining() != expected {
            return Err(bad(&format!(
                "{layers} layers of dimension {d} need {expected} parameter bytes, found {}",
                r.remaining()
            )));
        }
        let mut translators = Vec::with_capacity(layers);
        for l in 0..layers {
            let a: Vec<f64> = (0..d * d).map(|_| r.f64().expect("length checked")).collect();
            let b: Vec<f64> = (0..d).map(|_| r.f64().expect("length checked")).collect();
            let a = Matrix::from_vec(d, d, a).map_err(|e| bad(&format!("layer {}: {e}", l + 1)))?;
            translators.push(Translator::new(a, b).map_err(|e| bad(&format!("layer {}: {e}", l + 1)))?);
        }
        Self::new(translators, metadata)
    }
}

pub fn read_translators(path: impl AsRef<Path>) -> Result<TranslatorSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TranslatorSet::from_bytes(&bytes, path)
}

pub fn write_translators(set: &TranslatorSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &set.to_bytes())
}
