// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    /// Undefined value (e.g. an empty denominator). Written as an empty
    /// field.
    Absent,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_sig9(*v),
            Cell::Text(s) => s.clone(),
            Cell::Absent => String::new(),
        }
    }
}

/// Named columns of rows, with a provenance header written as `#` lines
/// ahead of the CSV body.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub provenance: Vec<(String, String)>,
}

impl ReportTable {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Sets (or replaces) a provenance entry.
    pub fn set_provenance(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.provenance.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.provenance.push((key.to_string(), value)),
        }
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Analysis(format!("report `{}` has no column `{name}`", self.name)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = row.iter().map(|c| csv_field(&c.as_text())).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Formats like C's `%.9g`: 9 significant digits, trailing zeros removed,
/// scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.25, "0.25"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (99999999.95, "100000000"),
            (1e-300, "1e-300"),
        ];
        for (v, s) in cases {
            assert_eq!(format_sig9(v), s, "{v}");
        }
    }

    #[test]
    fn csv_layout() {
        let mut t = ReportTable::new("x", &["a", "b", "c"]);
        t.set_provenance("seed", "3");
        t.set_provenance("seed", "4");
        t.push(vec![Cell::Int(1), Cell::Float(0.5), Cell::Absent]);
        t.push(vec![Cell::Text("A,B".into()), Cell::Float(1e-7), Cell::Int(-2)]);
        assert_eq!(t.to_csv(), "# seed: 4\na,b,c\n1,0.5,\n\"A,B\",1e-07,-2\n");
        assert!(t.column("b").is_ok());
        assert!(t.column("z").is_err());
    }
}
