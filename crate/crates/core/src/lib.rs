// SPDX-License-Identifier: MIT OR Apache-2.0

//! # depthlens
//!
//! Decodes intermediate transformer layers into vocabulary space and
//! measures how predictions evolve with depth.
//!
//! - [`numerics`]: softmax, KL divergence, final norms, projection, ranks.
//! - [`io`]: model dumps, frequency tables, translator sets, prefixes.
//! - [`lens`]: logit lens, tuned lens, and translator training.
//! - [`analysis`]: frequency buckets, decision flips, rank-threshold
//!   onsets, option mean ranks, probability mass.
//! - [`report`]: CSV tables and SVG charts.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is on (the
//! default). Results are identical either way; see [`par`].
//!
//! ```
//! use depthlens::lens::{Decoder, Lens};
//! use depthlens::synthetic::{toy_dump, ToySpec};
//!
//! let dump = toy_dump(&ToySpec::default());
//! let decoder = Decoder::new(&dump, Lens::Logit).unwrap();
//! let last = decoder.decode(0, dump.num_layers - 1);
//! assert_eq!(depthlens::numerics::top1(&last), dump.target_tokens[0]);
//! ```

pub mod analysis;
pub mod error;
pub mod io;
pub mod lens;
pub mod numerics;
pub mod par;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};

/// Crate version, recorded in artifact provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
