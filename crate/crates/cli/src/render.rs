//! Number formatting, aligned text tables and output emission.
//!
//! Every reported number is printed with six significant digits, and JSON
//! values are rounded the same way before serialisation, so identical inputs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::fs;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;
use crate::{Format, GlobalArgs};

/// `%g`-style formatting with six significant digits.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), fmt6)
}

/// CSV cell: six significant digits, empty when missing.
pub fn csv_num(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt6)
}

/// RFC-4180 text with `header` and `rows`.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn round6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serialise with sorted keys and six-significant-digit floats.
pub fn to_json<T: Serialize>(value: &T) -> Value {
    let mut v = serde_json::to_value(value).expect("report types serialise");
    round_value(&mut v);
    v
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serialises");
    s.push('\n');
    s
}

/// Text table. Columns whose cells are all numeric (or `-`, `undefined`) are
/// right-aligned, others left-aligned.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self, indent: usize) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let numeric = |c: &str| c.parse::<f64>().is_ok() || matches!(c, "-" | "" | "undefined");
        let right: Vec<bool> = (0..cols)
            .map(|j| {
                let cells: Vec<&str> = self.rows.iter().filter_map(|r| r.get(j)).map(String::as_str).collect();
                cells.iter().all(|c| numeric(c)) && cells.iter().any(|c| c.parse::<f64>().is_ok())
            })
            .collect();
        let pad = " ".repeat(indent);
        let mut out = String::new();
        for line in std::iter::once(&self.headers).chain(&self.rows) {
            let mut text = pad.clone();
            for (j, cell) in line.iter().enumerate().take(cols) {
                if j > 0 {
                    text.push_str("  ");
                }
                if right[j] {
                    let _ = write!(text, "{cell:>w$}", w = width[j]);
                } else {
                    let _ = write!(text, "{cell:<w$}", w = width[j]);
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Everything a subcommand produces.
pub struct Output {
    /// Stem of the JSON file written under `--out`.
    pub name: &'static str,
    pub text: String,
    pub json: Value,
    /// Extra files written under `--out`, as `(file name, contents)`.
    pub files: Vec<(String, String)>,
    /// Error reported after the output has been emitted.
    pub failure: Option<CliError>,
}

impl Output {
    pub fn new(name: &'static str, text: String, json: Value) -> Self {
        Self {
            name,
            text,
            json,
            files: Vec::new(),
            failure: None,
        }
    }

    pub fn emit(self, global: &GlobalArgs) -> Result<(), CliError> {
        match global.format {
            Format::Text => print!("{}", self.text),
            Format::Json => print!("{}", pretty(&self.json)),
        }
        if let Some(dir) = &global.out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{}.json", self.name)), pretty(&self.json))?;
            for (file, contents) in &self.files {
                fs::write(dir.join(file), contents)?;
            }
        }
        match self.failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt6(0.12), "0.12");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt6(-123456.7), "-123457");
        assert_eq!(fmt6(1234567.0), "1.23457e6");
        assert_eq!(fmt6(0.000012345678), "1.23457e-5");
        assert_eq!(fmt6(0.00012345678), "0.000123457");
        assert_eq!(fmt6(5.0), "5");
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(f64::INFINITY), "inf");
        assert_eq!(fmt6(999999.7), "1e6");
    }

    #[test]
    fn json_rounding() {
        let v = to_json(&serde_json::json!({"b": 0.1 + 0.2, "a": [1, 2.000000001], "c": 7u64}));
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"a":[1,2.0],"b":0.3,"c":7}"#);
    }

    #[test]
    fn aligned_table() {
        let mut t = Table::new(["name", "value"]);
        t.row(vec!["alpha".into(), "1".into()]);
        t.row(vec!["b".into(), "0.25".into()]);
        assert_eq!(t.render(2), "  name   value\n  alpha      1\n  b       0.25\n");
        let mut t = Table::new(["rank", "label"]);
        t.row(vec!["10".into(), "x".into()]);
        t.row(vec!["2".into(), "yy".into()]);
        assert_eq!(t.render(0), "rank  label\n  10  x\n   2  yy\n");
    }
}
