// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dependency-free SVG charts for the report tables.
//!
//! Output is a fixed 960×540 viewBox. Series colors come from a fixed
//! palette indexed by series order, so identical tables render to
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::table::{format_sig9, ReportTable};
use crate::error::{Error, Result};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    StackedArea,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)`; a `None` y breaks the line.
    pub points: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub kind: ChartKind,
    pub log_x: bool,
    pub log_y: bool,
    /// Labels for categorical x positions `0, 1, ...`.
    pub x_categories: Option<Vec<String>>,
    pub series: Vec<Series>,
}

impl Chart {
    fn new(title: &str, x_label: &str, y_label: &str, kind: ChartKind) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            kind,
            log_x: false,
            log_y: false,
            x_categories: None,
            series: Vec::new(),
        }
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Groups `(x, y)` pairs by the text of `key`, keeping first-seen order.
fn group_series(table: &ReportTable, key: &[&str], x: &str, y: &str) -> Result<Vec<Series>> {
    let key_idx: Vec<usize> = key.iter().map(|k| table.column(k)).collect::<Result<_>>()?;
    let (xi, yi) = (table.column(x)?, table.column(y)?);
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for row in &table.rows {
        let name = key_idx.iter().map(|&i| row[i].as_text()).collect::<Vec<_>>().join(" L");
        let xv = row[xi]
            .as_f64()
            .ok_or_else(|| Error::Analysis(format!("non-numeric `{x}` in report `{}`", table.name)))?;
        if !groups.contains_key(&name) {
            order.push(name.clone());
        }
        groups.entry(name).or_default().push((xv, row[yi].as_f64()));
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let points = groups.remove(&name).unwrap_or_default();
            Series { name, points }
        })
        .collect())
}

/// Builds the chart matching a report table (by its `name`).
pub fn chart_for(table: &ReportTable) -> Result<Chart> {
    let chart = match table.name.as_str() {
        "buckets" => {
            let mut c = Chart::new(
                "Top-1 prediction share by frequency bucket",
                "layer",
                "fraction of examples",
                ChartKind::StackedArea,
            );
            c.series = group_series(table, &["bucket"], "layer", "fraction")?;
            c
        }
        "flips" => {
            let mut c = Chart::new(
                "Top-1 predictions overturned by the final layer",
                "layer",
                "flip rate",
                ChartKind::Line,
            );
            c.series = group_series(table, &["bucket"], "layer", "flip_rate")?;
            c
        }
        "onset" => {
            let mut c = Chart::new(
                "Earliest layer reaching each rank threshold",
                "rank threshold",
                "mean first-crossing layer",
                ChartKind::Line,
            );
            let ti = table.column("threshold")?;
            let mut thresholds: Vec<i64> = table
                .rows
                .iter()
                .filter_map(|r| r[ti].as_f64().map(|v| v as i64))
                .collect();
            thresholds.sort_unstable();
            thresholds.dedup();
            let series = group_series(table, &["category"], "threshold", "mean_layer")?;
            c.series = series
                .into_iter()
                .map(|s| Series {
                    name: s.name,
                    points: s
                        .points
                        .into_iter()
                        .map(|(x, y)| {
                            let pos = thresholds.iter().position(|&t| t == x as i64).unwrap_or(0);
                            (pos as f64, y)
                        })
                        .collect(),
                })
                .collect();
            c.x_categories = Some(thresholds.iter().map(|t| t.to_string()).collect());
            c
        }
        "meanrank" => {
            let mut c = Chart::new("Mean rank of answer options", "layer", "mean rank", ChartKind::Line);
            c.series = group_series(table, &["option"], "layer", "mean_rank")?;
            c.log_y = true;
            c
        }
        "probmass" => {
            let mut c = Chart::new(
                "Mean probability by token frequency rank",
                "token frequency rank",
                "mean probability",
                ChartKind::Line,
            );
            c.series = group_series(table, &["lens", "layer"], "freq_rank", "mean_prob")?;
            c.log_x = true;
            c.log_y = true;
            c
        }
        other => return Err(Error::Analysis(format!("no chart defined for report `{other}`"))),
    };
    Ok(chart)
}

pub fn render_report(table: &ReportTable) -> Result<String> {
    Ok(render(&chart_for(table)?))
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool, zero_floor: bool) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            let v = if log { v.max(1e-12).log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if zero_floor && !log {
            lo = lo.min(0.0);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.max(1e-12).log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.floor() as i32, self.hi.ceil() as i32);
            let step = ((b - a) / 8).max(1);
            (a..=b)
                .step_by(step as usize)
                .map(|e| 10f64.powi(e))
                .filter(|&v| (-1e-9..=1.0 + 1e-9).contains(&self.frac(v)))
                .map(|v| (v, format_sig9(v)))
                .collect()
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format_sig9((v * 1e6).round() / 1e6))
                })
                .collect()
        }
    }
}

fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders a chart to a standalone SVG document.
pub fn render(chart: &Chart) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;

    // Stacked areas plot cumulative sums.
    let stacked: Vec<Vec<(f64, f64, f64)>> = if chart.kind == ChartKind::StackedArea {
        let mut base: BTreeMap<u64, f64> = BTreeMap::new();
        chart
            .series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .map(|&(x, y)| {
                        let b = base.entry(x.to_bits()).or_insert(0.0);
                        let lo = *b;
                        *b += y.unwrap_or(0.0);
                        (x, lo, *b)
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let xs = chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x_axis = match &chart.x_categories {
        Some(cats) => Axis {
            lo: -0.5,
            hi: cats.len() as f64 - 0.5,
            log: false,
        },
        None => Axis::fit(xs, chart.log_x, false),
    };
    let y_axis = if chart.kind == ChartKind::StackedArea {
        Axis::fit(
            stacked.iter().flat_map(|s| s.iter().map(|p| p.2)).chain([0.0, 1.0]),
            false,
            true,
        )
    } else {
        Axis::fit(
            chart.series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1)),
            chart.log_y,
            !chart.log_y,
        )
    };
    let px = |x: f64| LEFT + x_axis.frac(x) * plot_w;
    let py = |y: f64| TOP + (1.0 - y_axis.frac(y)) * plot_h;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="28" font-size="18" text-anchor="middle">{}</text>"#,
        coord(LEFT + plot_w / 2.0),
        escape(&chart.title)
    );

    // Axes, ticks and grid.
    let _ = writeln!(out, r##"<g class="axes" stroke="#333" stroke-width="1">"##);
    let _ = writeln!(
        out,
        r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/>"#,
        l = coord(LEFT),
        r = coord(LEFT + plot_w),
        t = coord(TOP),
        b = coord(TOP + plot_h)
    );
    let _ = writeln!(out, "</g>");
    let x_ticks: Vec<(f64, String)> = match &chart.x_categories {
        Some(cats) => cats.iter().enumerate().map(|(i, c)| (i as f64, c.clone())).collect(),
        None => x_axis.ticks(),
    };
    for (v, label) in x_ticks {
        let x = coord(px(v));
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#333"/><text x="{x}" y="{}" font-size="12" text-anchor="middle">{}</text>"##,
            coord(TOP + plot_h),
            coord(TOP + plot_h + 5.0),
            coord(TOP + plot_h + 20.0),
            escape(&label)
        );
    }
    for (v, label) in y_axis.ticks() {
        let y = coord(py(v));
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{y}" font-size="12" text-anchor="end" dominant-baseline="middle">{}</text>"##,
            coord(LEFT),
            coord(LEFT + plot_w),
            coord(LEFT - 6.0),
            escape(&label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
        coord(LEFT + plot_w / 2.0),
        coord(HEIGHT - 20.0),
        escape(&chart.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="20" y="{y}" font-size="14" text-anchor="middle" transform="rotate(-90 20 {y})">{}</text>"#,
        escape(&chart.y_label),
        y = coord(TOP + plot_h / 2.0)
    );

    // Data.
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(&s.name);
        if chart.kind == ChartKind::StackedArea {
            let band = &stacked[i];
            if band.is_empty() {
                continue;
            }
            let mut d = String::new();
            for (j, &(x, _, hi)) in band.iter().enumerate() {
                let _ = write!(
                    d,
                    "{}{},{} ",
                    if j == 0 { "M" } else { "L" },
                    coord(px(x)),
                    coord(py(hi))
                );
            }
            for &(x, lo, _) in band.iter().rev() {
                let _ = write!(d, "L{},{} ", coord(px(x)), coord(py(lo)));
            }
            d.push('Z');
            let _ = writeln!(
                out,
                r#"<path data-series="{name}" d="{d}" fill="{color}" fill-opacity="0.75" stroke="{color}"/>"#
            );
        } else {
            let mut d = String::new();
            let mut pen_down = false;
            for &(x, y) in &s.points {
                match y {
                    Some(y) => {
                        let _ = write!(
                            d,
                            "{}{},{} ",
                            if pen_down { "L" } else { "M" },
                            coord(px(x)),
                            coord(py(y))
                        );
                        pen_down = true;
                    }
                    None => pen_down = false,
                }
            }
            let _ = writeln!(
                out,
                r#"<path data-series="{name}" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                d.trim_end()
            );
        }
    }

    // Legend, wrapped into columns when long.
    let per_col = ((plot_h / 18.0).floor() as usize).max(1);
    let col_w = if chart.series.len() > per_col {
        RIGHT / 2.0 - 10.0
    } else {
        RIGHT - 20.0
    };
    let _ = writeln!(out, r#"<g class="legend" font-size="12">"#);
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = LEFT + plot_w + 15.0 + (i / per_col) as f64 * col_w;
        let y = TOP + (i % per_col) as f64 * 18.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            coord(x),
            coord(y),
            coord(x + 16.0),
            coord(y + 10.0),
            escape(&s.name)
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}
