//! Report rendering: JSON lines per record and a plain-text summary table.

use serde::Serialize;
use tsgb_core::eval::{ConfigEcho, EvalReport, Record};

#[derive(Serialize)]
struct Line<'a> {
    metric: &'a str,
    #[serde(flatten)]
    record: &'a Record,
}

/// One JSON object per record, newline-terminated.
pub fn to_jsonl(rep: &EvalReport) -> Vec<u8> {
    let mut out = Vec::new();
    for r in &rep.records {
        let line = Line {
            metric: &rep.metric,
            record: r,
        };
        serde_json::to_writer(&mut out, &line).expect("records serialise");
        out.push(b'\n');
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    metric: &'a str,
    aggregation: tsgb_core::eval::Aggregation,
    records: usize,
    mean: f64,
    std: f64,
    config: &'a ConfigEcho,
}

/// Aggregates of several reports as pretty JSON.
pub fn summary_json(reports: &[&EvalReport]) -> Vec<u8> {
    let rows: Vec<Summary> = reports
        .iter()
        .map(|r| Summary {
            metric: &r.metric,
            aggregation: r.aggregation,
            records: r.records.len(),
            mean: r.mean,
            std: r.std,
            config: &r.config,
        })
        .collect();
    let mut out = serde_json::to_vec_pretty(&rows).expect("summary serialises");
    out.push(b'\n');
    out
}

/// Fixed-width table of metric, record count, mean and std.
pub fn summary_table(reports: &[&EvalReport]) -> String {
    let width = reports.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>7}  {:>10}  {:>10}\n", "metric", "records", "mean", "std");
    for r in reports {
        s.push_str(&format!(
            "{:<width$}  {:>7}  {:>10.4}  {:>10.4}\n",
            r.metric,
            r.records.len(),
            r.mean,
            r.std
        ));
    }
    s
}
