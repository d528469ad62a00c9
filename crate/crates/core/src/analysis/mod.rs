// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise prediction measurements.
//!
//! The report functions are pure over per-example summaries (top-1 ids,
//! ranks, probability sums). [`pipeline`] produces those summaries from a
//! [`Decoder`](crate::lens::Decoder) without materialising every logit.
//!
//! Layers are reported 1-based. Integer aggregates are summed exactly, so
//! integer-derived reports do not depend on example order.

pub mod pipeline;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::dump::Labels;
use crate::io::freq::FrequencyTable;
use crate::report::{Cell, ReportTable};

pub const DEFAULT_THRESHOLDS: [usize; 7] = [1, 2, 5, 10, 50, 100, 1000];

/// Frequency-rank cut points. `[10, 100, 1000]` gives the buckets
/// `Top1-10`, `Top11-100`, `Top101-1000` and `Top1000+`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSpec {
    boundaries: Vec<usize>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self {
            boundaries: vec![10, 100, 1000],
        }
    }
}

impl BucketSpec {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.is_empty() || boundaries[0] == 0 || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "bucket boundaries must be positive and strictly ascending, got {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.boundaries.len() + 1);
        let mut lo = 1;
        for &hi in &self.boundaries {
            names.push(format!("Top{lo}-{hi}"));
            lo = hi + 1;
        }
        names.push(format!("Top{}+", self.boundaries.last().expect("non-empty")));
        names
    }
}

/// Bucket index for every token id.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketAssignment {
    names: Vec<String>,
    bucket_of: Vec<usize>,
}

impl BucketAssignment {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_buckets(&self) -> usize {
        self.names.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.bucket_of.len()
    }

    pub fn bucket(&self, token: u32) -> usize {
        self.bucket_of[token as usize]
    }
}

/// Ranks tokens by `(count desc, id asc)` and cuts the ranking at the
/// spec's boundaries. Unseen tokens land in the last bucket.
pub fn assign_buckets(freq: &FrequencyTable, spec: &BucketSpec, vocab_size: usize) -> Result<BucketAssignment> {
    if freq.is_empty() {
        return Err(Error::Analysis("frequency table is empty".into()));
    }
    let order = freq.frequency_order(vocab_size)?;
    let names = spec.names();
    let last = names.len() - 1;
    let mut bucket_of = vec![last; vocab_size];
    for (i, &token) in order.iter().enumerate() {
        if freq.count(token) == 0 {
            break;
        }
        let rank = i + 1;
        bucket_of[token as usize] = spec.boundaries.iter().position(|&b| rank <= b).unwrap_or(last);
    }
    Ok(BucketAssignment { names, bucket_of })
}

fn check_top1(top1: &[Vec<u32>], buckets: &BucketAssignment) -> Result<usize> {
    let layers = top1.first().map_or(0, Vec::len);
    for (n, row) in top1.iter().enumerate() {
        if row.len() != layers {
            return Err(Error::Shape {
                what: format!("top-1 layers of example {n}"),
                expected: layers,
                actual: row.len(),
            });
        }
        if let Some(&t) = row.iter().find(|&&t| t as usize >= buckets.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: buckets.vocab_size(),
            });
        }
    }
    Ok(layers)
}

/// Share of examples whose top-1 token at each layer falls in each bucket.
///
/// `top1[n][l]` is the lens top-1 of example `n` at 0-based layer `l`.
pub fn bucket_composition(top1: &[Vec<u32>], buckets: &BucketAssignment) -> Result<ReportTable> {
    let layers = check_top1(top1, buckets)?;
    let nb = buckets.num_buckets();
    let mut counts = vec![vec![0u64; nb]; layers];
    for row in top1 {
        for (l, &t) in row.iter().enumerate() {
            counts[l][buckets.bucket(t)] += 1;
        }
    }
    let n = top1.len();
    let mut table = ReportTable::new("buckets", &["layer", "bucket", "fraction"]);
    for (l, row) in counts.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            let fraction = if n == 0 {
                Cell::Absent
            } else {
                Cell::Float(c as f64 / n as f64)
            };
            table.push(vec![
                Cell::Int(l as i64 + 1),
                Cell::Text(buckets.names()[b].clone()),
                fraction,
            ]);
        }
    }
    Ok(table)
}

/// Per (layer, bucket): among examples whose layer top-1 lies in the
/// bucket, the fraction whose top-1 differs from `final_top1`.
///
/// `count` is that conditioning population; when it is zero the rate is
/// [`Cell::Absent`].
pub fn decision_flip_rates(top1: &[Vec<u32>], final_top1: &[u32], buckets: &BucketAssignment) -> Result<ReportTable> {
    let layers = check_top1(top1, buckets)?;
    if final_top1.len() != top1.len() {
        return Err(Error::Shape {
            what: "final top-1 ids".into(),
            expected: top1.len(),
            actual: final_top1.len(),
        });
    }
    let nb = buckets.num_buckets();
    let mut total = vec![vec![0u64; nb]; layers];
    let mut flipped = vec![vec![0u64; nb]; layers];
    for (row, &fin) in top1.iter().zip(final_top1) {
        for (l, &t) in row.iter().enumerate() {
            let b = buckets.bucket(t);
            total[l][b] += 1;
            if t != fin {
                flipped[l][b] += 1;
            }
        }
    }
    let mut table = ReportTable::new("flips", &["layer", "bucket", "flip_rate", "count"]);
    for l in 0..layers {
        for b in 0..nb {
            let rate = if total[l][b] == 0 {
                Cell::Absent
            } else {
                Cell::Float(flipped[l][b] as f64 / total[l][b] as f64)
            };
            table.push(vec![
                Cell::Int(l as i64 + 1),
                Cell::Text(buckets.names()[b].clone()),
                rate,
                Cell::Int(total[l][b] as i64),
            ]);
        }
    }
    Ok(table)
}

/// Rank of one target token through the layers of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTrace {
    pub example: usize,
    pub target: u32,
    /// `ranks[l]` is the 1-based rank at 0-based layer `l`.
    pub ranks: Vec<usize>,
    pub labels: Labels,
}

pub fn check_thresholds(thresholds: &[usize]) -> Result<()> {
    if thresholds.is_empty() || thresholds[0] == 0 || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "thresholds must be >= 1 and strictly ascending, got {thresholds:?}"
        )));
    }
    Ok(())
}

/// For each threshold `k`, the first 1-based layer whose rank is `<= k`.
/// Later rises in rank are ignored.
pub fn earliest_crossing(ranks: &[usize], thresholds: &[usize]) -> Result<Vec<Option<usize>>> {
    check_thresholds(thresholds)?;
    Ok(thresholds
        .iter()
        .map(|&k| ranks.iter().position(|&r| r <= k).map(|l| l + 1))
        .collect())
}

/// Mean first-crossing layer per (category, threshold).
///
/// Traces are grouped by the value of `category_key`; categories listed
/// in `exclude` are dropped. `mean_layer` averages only traces that
/// cross; `never_fraction` is the share of the category that never does.
pub fn onset_report(
    traces: &[RankTrace],
    category_key: &str,
    thresholds: &[usize],
    exclude: &[String],
) -> Result<ReportTable> {
    check_thresholds(thresholds)?;
    let layers = traces.first().map_or(0, |t| t.ranks.len());
    // category -> (members, per-threshold (crossing count, layer sum))
    type Group = (u64, Vec<(u64, u64)>);
    let mut groups: BTreeMap<&str, Group> = BTreeMap::new();
    for trace in traces {
        if trace.ranks.len() != layers {
            return Err(Error::Shape {
                what: format!("rank trace of example {}", trace.example),
                expected: layers,
                actual: trace.ranks.len(),
            });
        }
        let category = trace.labels.get(category_key).ok_or_else(|| Error::MissingLabel {
            key: category_key.to_string(),
            example: trace.example,
        })?;
        if exclude.iter().any(|e| e == category) {
            continue;
        }
        let entry = groups
            .entry(category.as_str())
            .or_insert_with(|| (0, vec![(0, 0); thresholds.len()]));
        entry.0 += 1;
        for (slot, crossing) in entry.1.iter_mut().zip(earliest_crossing(&trace.ranks, thresholds)?) {
            if let Some(layer) = crossing {
                slot.0 += 1;
                slot.1 += layer as u64;
            }
        }
    }
    let mut table = ReportTable::new(
        "onset",
        &["category", "threshold", "mean_layer", "count", "never_fraction"],
    );
    for (category, (members, slots)) in groups {
        for (&k, &(crossed, layer_sum)) in thresholds.iter().zip(&slots) {
            let mean = if crossed == 0 {
                Cell::Absent
            } else {
                Cell::Float(layer_sum as f64 / crossed as f64)
            };
            table.push(vec![
                Cell::Text(category.to_string()),
                Cell::Int(k as i64),
                mean,
                Cell::Int(crossed as i64),
                Cell::Float((members - crossed) as f64 / members as f64),
            ]);
        }
    }
    Ok(table)
}

/// Mean rank of each option token per layer.
///
/// `option_ranks[n][l][j]` is the rank of `options[j]` for example `n` at
/// 0-based layer `l`.
pub fn mean_rank_trace(options: &[u32], option_ranks: &[Vec<Vec<usize>>]) -> Result<ReportTable> {
    let layers = option_ranks.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0u64; options.len()]; layers];
    for (n, ex) in option_ranks.iter().enumerate() {
        if ex.len() != layers || ex.iter().any(|r| r.len() != options.len()) {
            return Err(Error::Shape {
                what: format!("option ranks of example {n}"),
                expected: layers * options.len(),
                actual: ex.iter().map(Vec::len).sum(),
            });
        }
        for (l, ranks) in ex.iter().enumerate() {
            for (j, &r) in ranks.iter().enumerate() {
                sums[l][j] += r as u64;
            }
        }
    }
    let n = option_ranks.len();
    let mut table = ReportTable::new("meanrank", &["layer", "option", "mean_rank"]);
    for (l, row) in sums.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            let mean = if n == 0 {
                Cell::Absent
            } else {
                Cell::Float(s as f64 / n as f64)
            };
            table.push(vec![Cell::Int(l as i64 + 1), Cell::Int(options[j] as i64), mean]);
        }
    }
    Ok(table)
}

/// Mean probability per token and layer under one lens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMass {
    pub lens: String,
    /// `means[l][v]`, 0-based layer.
    pub means: Vec<Vec<f64>>,
}

/// Mean probability assigned to each token, by frequency rank.
///
/// Rows come per lens and layer, tokens in `order` (most frequent first),
/// optionally truncated to the first `top_tokens`. The reference
/// distribution is emitted under lens `final` at the last layer.
pub fn prob_mass_report(
    series: &[ProbMass],
    final_means: &[f64],
    order: &[u32],
    top_tokens: Option<usize>,
) -> Result<ReportTable> {
    let vocab = final_means.len();
    let layers = series.first().map_or(1, |s| s.means.len());
    for s in series {
        if s.means.len() != layers || s.means.iter().any(|m| m.len() != vocab) {
            return Err(Error::Shape {
                what: format!("probability means for lens `{}`", s.lens),
                expected: layers * vocab,
                actual: s.means.iter().map(Vec::len).sum(),
            });
        }
    }
    if let Some(&t) = order.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: vocab,
        });
    }
    let keep = top_tokens.unwrap_or(order.len()).min(order.len());
    let mut table = ReportTable::new("probmass", &["freq_rank", "token", "layer", "lens", "mean_prob"]);
    let mut emit = |lens: &str, layer: usize, means: &[f64]| {
        for (i, &t) in order[..keep].iter().enumerate() {
            table.push(vec![
                Cell::Int(i as i64 + 1),
                Cell::Int(t as i64),
                Cell::Int(layer as i64),
                Cell::Text(lens.to_string()),
                Cell::Float(means[t as usize]),
            ]);
        }
    };
    for s in series {
        for (l, means) in s.means.iter().enumerate() {
            emit(&s.lens, l + 1, means);
        }
    }
    emit("final", layers, final_means);
    Ok(table)
}
