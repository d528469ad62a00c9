// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus token counts.
//!
//! File layout: `u64` pair count, then `(u32 token, u64 count)` pairs in
//! ascending token order, all little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{write_atomic, ByteReader};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let mut table = Self::new();
        for (token, count) in counts {
            table.add(token, count);
        }
        table
    }

    pub fn add(&mut self, token: u32, count: u64) {
        *self.counts.entry(token).or_insert(0) += count;
        self.total += count;
    }

    /// Adds every count of `other` into `self`.
    pub fn merge(&mut self, other: &FrequencyTable) {
        for (&t, &c) in &other.counts {
            self.add(t, c);
        }
    }

    pub fn count(&self, token: u32) -> u64 {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&t, &c)| (t, c))
    }

    pub fn max_token(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }

    /// Every token id in `0..vocab_size`, most frequent first. Ties and
    /// unseen tokens are ordered by ascending id.
    pub fn frequency_order(&self, vocab_size: usize) -> Result<Vec<u32>> {
        if let Some(t) = self.max_token() {
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { token: t, vocab_size });
            }
        }
        let mut seen: Vec<(u32, u64)> = self.iter().filter(|&(_, c)| c > 0).collect();
        seen.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut order: Vec<u32> = seen.iter().map(|&(t, _)| t).collect();
        order.extend((0..vocab_size as u32).filter(|&t| self.count(t) == 0));
        Ok(order)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.counts.len() * 12);
        out.extend_from_slice(&(self.counts.len() as u64).to_le_bytes());
        for (&t, &c) in &self.counts {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, "frequency table", detail);
        let mut r = ByteReader::new(bytes);
        let pairs = r.u64().ok_or_else(|| bad("missing pair count".into()))?;
        if (r.remaining() as u64) != pairs.saturating_mul(12) {
            return Err(bad(format!(
                "header declares {pairs} pairs ({} bytes) but {} bytes follow",
                pairs.saturating_mul(12),
                r.remaining()
            )));
        }
        let mut table = Self::new();
        let mut prev: Option<u32> = None;
        for i in 0..pairs {
            let t = r.u32().expect("length checked");
            let c = r.u64().expect("length checked");
            if prev.is_some_and(|p| p >= t) {
                return Err(bad(format!("pair {i}: token {t} not in strictly ascending order")));
            }
            prev = Some(t);
            table.total = table
                .total
                .checked_add(c)
                .ok_or_else(|| bad("total count overflows u64".into()))?;
            table.counts.insert(t, c);
        }
        Ok(table)
    }
}

/// Exact multiset counts of `stream`. Ids must be below `vocab_size`.
pub fn count_tokens(stream: impl IntoIterator<Item = u32>, vocab_size: usize) -> Result<FrequencyTable> {
    let mut dense = vec![0u64; vocab_size];
    for (position, token) in stream.into_iter().enumerate() {
        match dense.get_mut(token as usize) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::TokenStream {
                    position,
                    token,
                    vocab_size,
                })
            }
        }
    }
    Ok(FrequencyTable::from_counts(
        dense
            .into_iter()
            .enumerate()
            .filter(|&(_, c)| c > 0)
            .map(|(t, c)| (t as u32, c)),
    ))
}

pub fn read_frequency_table(path: impl AsRef<Path>) -> Result<FrequencyTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FrequencyTable::from_bytes(&bytes, path)
}

pub fn write_frequency_table(table: &FrequencyTable, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &table.to_bytes())
}
