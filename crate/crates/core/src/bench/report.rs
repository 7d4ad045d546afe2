//! Tabular reports in CSV and JSON. Floats always carry six decimals so
//! reruns diff cleanly.

use std::fmt::Write as _;

use serde_json::{Map, Value};

use thiserror::Error;

use crate::bench::jitter::JitterReport;
use crate::bench::micro::MicroResult;
use crate::bench::overhead::OverheadReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report has the wrong shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i128),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.6}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => serde_json::from_str(&v.to_string()).expect("integer"),
            // Parsing the 6-decimal text keeps JSON and CSV in agreement.
            Cell::Float(v) if v.is_finite() => serde_json::from_str(&format!("{v:.6}")).expect("decimal"),
            Cell::Float(_) => Value::Null,
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Bool(b) => Value::Bool(*b),
        }
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i128)
    }
}
impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i128)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl Report {
    pub fn new(kind: &str, columns: Vec<&str>) -> Self {
        Report { kind: kind.to_string(), columns: columns.into_iter().map(String::from).collect(), rows: Vec::new() }
    }

    /// Read back a report written by [`Report::to_json`].
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let v: Value = serde_json::from_str(text)?;
        let bad = |m: &str| ReportError::Shape(m.to_string());
        let kind = v["report"].as_str().ok_or_else(|| bad("missing `report`"))?.to_string();
        let columns: Vec<String> = v["columns"]
            .as_array()
            .ok_or_else(|| bad("missing `columns`"))?
            .iter()
            .map(|c| c.as_str().map(String::from).ok_or_else(|| bad("column names must be strings")))
            .collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for r in v["rows"].as_array().ok_or_else(|| bad("missing `rows`"))? {
            let row = columns
                .iter()
                .map(|c| match &r[c.as_str()] {
                    Value::Bool(b) => Ok(Cell::Bool(*b)),
                    Value::String(s) => Ok(Cell::Text(s.clone())),
                    Value::Null => Ok(Cell::Float(f64::NAN)),
                    Value::Number(n) if n.is_i64() || n.is_u64() => {
                        Ok(Cell::Int(n.to_string().parse().expect("integer")))
                    }
                    Value::Number(n) => Ok(Cell::Float(n.as_f64().expect("float"))),
                    _ => Err(bad("cells must be scalars")),
                })
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        Ok(Report { kind, columns, rows })
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::render).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let m: Map<String, Value> =
                    self.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.json())).collect();
                Value::Object(m)
            })
            .collect();
        let doc = serde_json::json!({ "report": self.kind, "columns": self.columns, "rows": rows });
        let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
        s.push('\n');
        s
    }

    pub fn render(&self, f: Format) -> String {
        match f {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

pub fn micro_report(results: &[MicroResult]) -> Report {
    let mut r = Report::new("micro", vec!["bench", "samples", "mean_ns", "reference_ns", "error"]);
    for m in results {
        r.push(vec![
            m.bench.name().into(),
            m.samples.into(),
            m.mean_ns.into(),
            m.reference_ns.into(),
            m.error().into(),
        ]);
    }
    r
}

pub fn overhead_report(results: &[OverheadReport]) -> Report {
    let mut r = Report::new(
        "overhead",
        vec![
            "scenario",
            "vm",
            "duration_ns",
            "interrupts",
            "int_freq",
            "ws_cost_ns",
            "estimated",
            "measured",
            "charged_ns",
            "world_switches",
            "ws_per_interrupt",
        ],
    );
    for o in results {
        r.push(vec![
            o.scenario.clone().into(),
            o.vm.into(),
            o.duration_ns.into(),
            o.interrupts.into(),
            o.int_freq.into(),
            // Six decimals of seconds would round 1.5e-6 away.
            Cell::from((o.ws_cost * 1e9).round() as u64),
            o.estimated.into(),
            o.measured.into(),
            o.charged_ns.into(),
            o.world_switches.into(),
            o.ws_per_interrupt.into(),
        ]);
    }
    r
}

pub fn jitter_report(j: &JitterReport) -> Report {
    let mut r =
        Report::new("jitter", vec!["seed", "config", "count", "min_ns", "avg_ns", "max_ns", "normalized_jitter"]);
    for e in &j.entries {
        r.push(vec![
            e.seed.into(),
            e.config.name().into(),
            e.stats.count.into(),
            e.stats.min.into(),
            e.stats.avg.into(),
            e.stats.max.into(),
            e.stats.normalized_jitter.unwrap_or(f64::NAN).into(),
        ]);
    }
    r
}

pub fn ordering_report(j: &JitterReport) -> Report {
    let mut r = Report::new(
        "jitter_orderings",
        vec![
            "seed",
            "native_le_passthrough",
            "passthrough_lt_vgic_emul",
            "vgic_emul_lt_kvm_like",
            "kvm_like_lt_non_rt",
            "passthrough_within_1_2",
            "non_rt_ge_50x_passthrough",
        ],
    );
    for o in &j.orderings {
        r.push(vec![
            o.seed.into(),
            o.native_le_passthrough.into(),
            o.passthrough_lt_vgic_emul.into(),
            o.vgic_emul_lt_kvm_like.into(),
            o.kvm_like_lt_non_rt.into(),
            o.passthrough_within_1_2.into(),
            o.non_rt_ge_50x_passthrough.into(),
        ]);
    }
    r
}
