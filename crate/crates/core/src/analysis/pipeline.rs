// SPDX-License-Identifier: MIT OR Apache-2.0

//! Streaming summaries of decoded logits.
//!
//! Each example is decoded, reduced to what the reports need, and dropped,
//! fanning out over examples according to the decoder's
//! [`Exec`](crate::par::Exec).

use crate::error::{Error, Result};
use crate::io::dump::{widen, ModelDump};
use crate::io::freq::FrequencyTable;
use crate::lens::{Decoder, Lens};
use crate::numerics;
use crate::report::ReportTable;

use super::{
    assign_buckets, bucket_composition, decision_flip_rates, mean_rank_trace, onset_report, prob_mass_report,
    BucketSpec, ProbMass, RankTrace, DEFAULT_THRESHOLDS,
};

/// `top1[n][l]` for every example and 0-based layer.
pub fn layer_top1(decoder: &Decoder<'_>) -> Vec<Vec<u32>> {
    let dump = decoder.dump();
    decoder.exec().map(0..dump.num_examples, |n| {
        (0..dump.num_layers)
            .map(|l| numerics::top1(&decoder.decode(n, l)))
            .collect()
    })
}

/// Rank traces of `targets` (defaulting to the dump's target tokens), with
/// labels copied from the dump.
pub fn build_rank_traces(decoder: &Decoder<'_>, targets: Option<&[u32]>) -> Result<Vec<RankTrace>> {
    let dump = decoder.dump();
    let targets = targets.unwrap_or(&dump.target_tokens);
    if targets.len() != dump.num_examples {
        return Err(Error::Shape {
            what: "rank trace targets".into(),
            expected: dump.num_examples,
            actual: targets.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= dump.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: dump.vocab_size,
        });
    }
    Ok(decoder.exec().map(0..dump.num_examples, |n| RankTrace {
        example: n,
        target: targets[n],
        ranks: (0..dump.num_layers)
            .map(|l| numerics::rank_unchecked(&decoder.decode(n, l), targets[n] as usize))
            .collect(),
        labels: dump.labels.as_ref().map(|ls| ls[n].clone()).unwrap_or_default(),
    }))
}

/// `ranks[n][l][j]`: rank of `options[j]` for example `n` at layer `l`.
pub fn option_ranks(decoder: &Decoder<'_>, options: &[u32]) -> Result<Vec<Vec<Vec<usize>>>> {
    let dump = decoder.dump();
    if let Some(&t) = options.iter().find(|&&t| t as usize >= dump.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: dump.vocab_size,
        });
    }
    Ok(decoder.exec().map(0..dump.num_examples, |n| {
        (0..dump.num_layers)
            .map(|l| {
                let logits = decoder.decode(n, l);
                options
                    .iter()
                    .map(|&o| numerics::rank_unchecked(&logits, o as usize))
                    .collect()
            })
            .collect()
    }))
}

/// Mean lens probability per layer and token.
pub fn mean_probabilities(decoder: &Decoder<'_>) -> ProbMass {
    let dump = decoder.dump();
    let (layers, vocab, n) = (dump.num_layers, dump.vocab_size, dump.num_examples);
    let sums = decoder.exec().chunked_fold(
        0..n,
        || vec![vec![0.0f64; vocab]; layers],
        |acc, i| {
            for (l, row) in acc.iter_mut().enumerate() {
                let q = numerics::softmax_unchecked(&decoder.decode(i, l));
                for (s, qi) in row.iter_mut().zip(&q) {
                    *s += qi;
                }
            }
        },
        |a: &mut Vec<Vec<f64>>, b| add_nested(a, b),
    );
    ProbMass {
        lens: decoder.lens().name().to_string(),
        means: sums.into_iter().map(|row| divide(row, n)).collect(),
    }
}

/// Mean final-layer probability per token: the model's own output
/// distribution, recomputed at 64-bit from the last hidden state rather
/// than read from the 32-bit stored logits. This is what an identity
/// translator at the last layer decodes to, bit for bit.
pub fn mean_final_probabilities(decoder: &Decoder<'_>) -> Vec<f64> {
    let dump = decoder.dump();
    let (vocab, n, last) = (dump.vocab_size, dump.num_examples, dump.num_layers - 1);
    let sums = decoder.exec().chunked_fold(
        0..n,
        || vec![0.0f64; vocab],
        |acc, i| {
            let h = widen(dump.hidden(i, last));
            let z = decoder
                .unembedding()
                .matvec_unchecked(&numerics::apply_norm_unchecked(&h, decoder.norm()));
            for (s, pi) in acc.iter_mut().zip(&numerics::softmax_unchecked(&z)) {
                *s += pi;
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    );
    divide(sums, n)
}

fn add_nested(a: &mut [Vec<f64>], b: Vec<Vec<f64>>) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

fn divide(row: Vec<f64>, n: usize) -> Vec<f64> {
    if n == 0 {
        return row;
    }
    let n = n as f64;
    row.into_iter().map(|s| s / n).collect()
}

/// The five layer-wise reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Buckets,
    Flips,
    Onset,
    MeanRank,
    ProbMass,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] = [
        ReportKind::Buckets,
        ReportKind::Flips,
        ReportKind::Onset,
        ReportKind::MeanRank,
        ReportKind::ProbMass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Buckets => "buckets",
            ReportKind::Flips => "flips",
            ReportKind::Onset => "onset",
            ReportKind::MeanRank => "meanrank",
            ReportKind::ProbMass => "probmass",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Inputs beyond the decoder that individual reports need.
#[derive(Debug, Clone)]
pub struct ReportOptions<'a> {
    /// Required by buckets, flips and probmass.
    pub freq: Option<&'a FrequencyTable>,
    pub buckets: BucketSpec,
    pub thresholds: Vec<usize>,
    pub category_key: String,
    /// Categories left out of the onset report.
    pub exclude: Vec<String>,
    /// Option tokens for meanrank; taken from the `options` label when absent.
    pub options: Option<Vec<u32>>,
    /// Truncates probmass to the most frequent tokens.
    pub top_tokens: Option<usize>,
}

impl Default for ReportOptions<'_> {
    fn default() -> Self {
        Self {
            freq: None,
            buckets: BucketSpec::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            category_key: "pos".into(),
            exclude: vec!["OTHER".into()],
            options: None,
            top_tokens: None,
        }
    }
}

pub const OPTIONS_LABEL: &str = "options";

/// Option ids from the `options` label (`|`-separated token ids), which
/// must be the same for every example.
pub fn options_from_labels(dump: &ModelDump) -> Result<Vec<u32>> {
    let labels = dump.labels.as_ref().ok_or_else(|| Error::MissingLabel {
        key: OPTIONS_LABEL.into(),
        example: 0,
    })?;
    let mut shared: Option<&str> = None;
    for (n, l) in labels.iter().enumerate() {
        let v = l.get(OPTIONS_LABEL).ok_or_else(|| Error::MissingLabel {
            key: OPTIONS_LABEL.into(),
            example: n,
        })?;
        match shared {
            None => shared = Some(v),
            Some(s) if s != v => {
                return Err(Error::Analysis(format!(
                    "examples 0 and {n} list different options (`{s}` vs `{v}`); pass the option ids explicitly"
                )))
            }
            _ => {}
        }
    }
    let raw = shared.ok_or_else(|| Error::Analysis("dump has no examples".into()))?;
    raw.split('|')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| Error::Analysis(format!("option `{t}` in label `{raw}` is not a token id")))
        })
        .collect()
}

fn require_freq<'a>(opts: &ReportOptions<'a>, kind: ReportKind) -> Result<&'a FrequencyTable> {
    opts.freq
        .ok_or_else(|| Error::Config(format!("report `{}` needs a frequency table", kind.name())))
}

/// Top-1 of the logit lens at the last layer: the model's own prediction,
/// used as the reference for decision flips.
pub fn final_top1(decoder: &Decoder<'_>) -> Vec<u32> {
    let dump = decoder.dump();
    let last = dump.num_layers - 1;
    decoder.exec().map(0..dump.num_examples, |n| {
        let h = widen(dump.hidden(n, last));
        numerics::top1(
            &decoder
                .unembedding()
                .matvec_unchecked(&numerics::apply_norm_unchecked(&h, decoder.norm())),
        )
    })
}

/// Computes one report under the decoder's lens.
///
/// The probmass report always includes the logit lens; a tuned decoder
/// adds its own series ahead of it.
pub fn run_report(decoder: &Decoder<'_>, kind: ReportKind, opts: &ReportOptions<'_>) -> Result<ReportTable> {
    let dump = decoder.dump();
    let mut table = match kind {
        ReportKind::Buckets => {
            let buckets = assign_buckets(require_freq(opts, kind)?, &opts.buckets, dump.vocab_size)?;
            bucket_composition(&layer_top1(decoder), &buckets)?
        }
        ReportKind::Flips => {
            let buckets = assign_buckets(require_freq(opts, kind)?, &opts.buckets, dump.vocab_size)?;
            decision_flip_rates(&layer_top1(decoder), &final_top1(decoder), &buckets)?
        }
        ReportKind::Onset => {
            if dump.labels.is_none() {
                return Err(Error::MissingLabel {
                    key: opts.category_key.clone(),
                    example: 0,
                });
            }
            let traces = build_rank_traces(decoder, None)?;
            onset_report(&traces, &opts.category_key, &opts.thresholds, &opts.exclude)?
        }
        ReportKind::MeanRank => {
            let options = match &opts.options {
                Some(o) => o.clone(),
                None => options_from_labels(dump)?,
            };
            mean_rank_trace(&options, &option_ranks(decoder, &options)?)?
        }
        ReportKind::ProbMass => {
            let freq = require_freq(opts, kind)?;
            let order = freq.frequency_order(dump.vocab_size)?;
            let mut series = vec![mean_probabilities(decoder)];
            if let Lens::Tuned(_) = decoder.lens() {
                let logit = Decoder::new(dump, Lens::Logit)?.with_exec(decoder.exec());
                series.push(mean_probabilities(&logit));
            }
            prob_mass_report(&series, &mean_final_probabilities(decoder), &order, opts.top_tokens)?
        }
    };
    table.set_provenance("report", kind.name());
    table.set_provenance("lens", decoder.lens().name());
    table.set_provenance("model", dump.model_name.clone());
    Ok(table)
}
