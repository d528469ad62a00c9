// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tabular report output (CSV) and the SVG charts derived from it.

pub mod svg;
mod table;

pub use table::{format_sig9, Cell, ReportTable};
