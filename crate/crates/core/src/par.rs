// SPDX-License-Identifier: MIT OR Apache-2.0

//! Execution strategy for the data-parallel loops.
//!
//! Results never depend on the strategy: maps preserve input order and
//! floating-point reductions go through [`Exec::chunked_fold`], whose tree
//! shape is fixed by the chunk size rather than by the thread count.

use std::ops::Range;

/// Examples per reduction chunk. Part of the summation order, so changing
/// it changes low-order bits of probability-mass sums.
pub const REDUCE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled and falls
    /// back to sequential execution otherwise.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// `f` applied to each index, collected in index order.
    pub fn map<T, F>(self, range: Range<usize>, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                range.into_par_iter().map(f).collect()
            }
            _ => range.map(f).collect(),
        }
    }

    /// Folds `range` in fixed chunks of [`REDUCE_CHUNK`], then merges the
    /// chunk results left to right.
    pub fn chunked_fold<A, I, F, M>(self, range: Range<usize>, init: I, fold: F, merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, usize) + Sync + Send,
        M: Fn(&mut A, A),
    {
        let start = range.start;
        let len = range.len();
        let chunks = len.div_ceil(REDUCE_CHUNK);
        let partials = self.map(0..chunks, |c| {
            let mut acc = init();
            let lo = start + c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(start + len);
            for i in lo..hi {
                fold(&mut acc, i);
            }
            acc
        });
        let mut total = init();
        for p in partials {
            merge(&mut total, p);
        }
        total
    }
}
