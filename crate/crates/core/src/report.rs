//! Run reports: ordered `key=value` text, per-horizon tables and seed means.

use std::fmt::{Display, Write as _};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::train::EvalMetrics;

/// Ordered `key=value` lines. Keys may repeat only through `push`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvReport {
    entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Last value recorded under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses rendered text back; values stay strings.
    pub fn parse(text: &str) -> Result<Self> {
        parse_kv(text)?;
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Ok(Self { entries })
    }

    /// JSON object; numeric and boolean values are typed, the rest are
    /// strings. Later duplicates win.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.entries {
            let typed = if let Ok(b) = v.parse::<bool>() {
                Value::Bool(b)
            } else if let Some(n) = v.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                Value::Number(n)
            } else {
                Value::String(v.clone())
            };
            map.insert(k.clone(), typed);
        }
        Value::Object(map)
    }
}

/// One row of a metric table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub label: String,
    pub mse: f64,
    pub mae: f64,
}

impl MetricRow {
    pub fn new(label: impl Into<String>, m: &EvalMetrics) -> Self {
        Self {
            label: label.into(),
            mse: m.mse,
            mae: m.mae,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Element-wise mean of several runs (e.g. seeds) on the same windows.
pub fn mean_metrics(runs: &[EvalMetrics]) -> Result<EvalMetrics> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Contract("mean of zero runs".into()))?;
    if runs.iter().any(|r| r.windows != first.windows) {
        return Err(Error::Contract("runs were evaluated on different window counts".into()));
    }
    Ok(EvalMetrics {
        mse: mean(runs.iter().map(|r| r.mse)),
        mae: mean(runs.iter().map(|r| r.mae)),
        mse_raw: mean(runs.iter().map(|r| r.mse_raw)),
        mae_raw: mean(runs.iter().map(|r| r.mae_raw)),
        windows: first.windows,
    })
}

/// One row per horizon followed by their unweighted average.
pub fn horizon_table(rows: &[(usize, EvalMetrics)]) -> Result<Vec<MetricRow>> {
    if rows.is_empty() {
        return Err(Error::Config("horizon list is empty".into()));
    }
    let mut out: Vec<MetricRow> = rows.iter().map(|(h, m)| MetricRow::new(h.to_string(), m)).collect();
    out.push(MetricRow {
        label: "avg".into(),
        mse: mean(rows.iter().map(|(_, m)| m.mse)),
        mae: mean(rows.iter().map(|(_, m)| m.mae)),
    });
    Ok(out)
}

/// Fixed-width text table with a header line.
pub fn render_table(first_col: &str, rows: &[MetricRow], extra: Option<(&str, &[String])>) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .chain([first_col.len()])
        .max()
        .unwrap_or(0);
    let mut s = format!("{first_col:<width$}  {:>10}  {:>10}", "MSE", "MAE");
    if let Some((name, _)) = extra {
        let _ = write!(s, "  {name:>12}");
    }
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(s, "{:<width$}  {:>10.6}  {:>10.6}", r.label, r.mse, r.mae);
        if let Some((_, col)) = extra {
            let _ = write!(s, "  {:>12}", col.get(i).map(String::as_str).unwrap_or(""));
        }
        s.push('\n');
    }
    s
}
