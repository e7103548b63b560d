//! Deterministic JSON reports and CSV series.
//!
//! Floats are written with 17 significant digits in exponent form, object
//! keys keep insertion order, and non-finite numbers become `null`.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::linalg::C64;

struct FixedFloats<'a>(PrettyFormatter<'a>);

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for FixedFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(format_float(v).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }

    forward!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );
}

/// 17 significant digits, or `null` when not finite.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

/// Pretty JSON with fixed float formatting and a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser).expect("report serializes");
    out.push(b'\n');
    String::from_utf8(out).expect("utf8")
}

pub fn complex(z: C64) -> Value {
    json!({"re": z.re, "im": z.im})
}

/// Provenance block attached to every report. `residuals` lists what the
/// computation achieved, next to the tolerances it was asked for.
pub fn provenance(command: &str, cfg: &RunConfig, residuals: Map<String, Value>) -> Value {
    json!({
        "tool": "cmps",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "tolerances": {
            "dense_budget": cfg.dense_budget,
            "eig_tol": cfg.eig_tol,
            "solve_tol": cfg.solve_tol,
            "ode_tol": cfg.ode_tol,
        },
        "residuals": Value::Object(residuals),
    })
}

pub fn report(command: &str, cfg: &RunConfig, result: Value, residuals: Map<String, Value>, warnings: &[String]) -> Value {
    json!({
        "command": command,
        "result": result,
        "warnings": warnings,
        "provenance": provenance(command, cfg, residuals),
    })
}

/// CSV table with a header row; floats use the report formatting.
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "csv row width");
        self.rows.push(
            row.into_iter()
                .map(|c| match c {
                    Cell::Num(v) => if v.is_finite() { format_float(v) } else { String::new() },
                    Cell::Text(s) => s,
                })
                .collect(),
        );
    }

    /// `(x, re, im)` series.
    pub fn series(x: &[f64], values: &[C64]) -> Self {
        let mut t = Csv::new(&["x", "re", "im"]);
        for (xi, z) in x.iter().zip(values) {
            t.push(vec![(*xi).into(), z.re.into(), z.im.into()]);
        }
        t
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}
