use std::fmt::Write;

use super::{EvaluationReport, MetricSet};

const METRICS: [&str; 4] = ["Accuracy", "Precision", "Recall", "F1-score"];

fn values(m: &MetricSet) -> [Option<f64>; 4] {
    [Some(m.accuracy), m.precision, m.recall, m.f1]
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.decimals$}"))
}

/// Criterion-level table: one row per criterion plus an `Average` row, one
/// column group per metric with a column per labelled report inside it.
/// Rows follow the first report's criterion order.
pub fn render_comparison_markdown(columns: &[(&str, &EvaluationReport)]) -> String {
    let mut out = String::from("| Criteria |");
    for metric in METRICS {
        for (name, _) in columns {
            let _ = write!(out, " {metric} ({name}) |");
        }
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(METRICS.len() * columns.len()));
    out.push('\n');

    let mut row = |label: &str, sets: Vec<Option<&MetricSet>>| {
        let _ = write!(out, "| {label} |");
        for i in 0..METRICS.len() {
            for set in &sets {
                let _ = write!(out, " {} |", cell(set.and_then(|m| values(m)[i]), 3));
            }
        }
        out.push('\n');
    };
    if let Some((_, first)) = columns.first() {
        for c in &first.per_criterion {
            let sets = columns
                .iter()
                .map(|(_, r)| r.per_criterion.iter().find(|x| x.criterion_id == c.criterion_id).map(|x| &x.metrics))
                .collect();
            row(c.criterion_id.as_str(), sets);
        }
    }
    row("Average", columns.iter().map(|(_, r)| Some(&r.macro_avg)).collect());
    out
}

/// Trial-level table: one row per metric, one column per labelled report.
/// Reports without trial metrics render `-`.
pub fn render_trial_markdown(columns: &[(&str, &EvaluationReport)]) -> String {
    let mut out = String::from("| Metric |");
    for (name, _) in columns {
        let _ = write!(out, " {name} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(columns.len()));
    out.push('\n');
    for (i, metric) in METRICS.iter().enumerate() {
        let _ = write!(out, "| {metric} |");
        for (_, report) in columns {
            let v = report.trial.as_ref().and_then(|t| values(&t.metrics)[i]);
            let _ = write!(out, " {} |", cell(v, 4));
        }
        out.push('\n');
    }
    out
}

/// `criterion,metric,value` rows; undefined values leave the cell empty.
/// The average appears as `AVERAGE` and trial metrics as `TRIAL`.
pub fn render_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("criterion,metric,value\n");
    let mut rows = |label: &str, m: &MetricSet| {
        for (name, v) in ["accuracy", "precision", "recall", "f1"].iter().zip(values(m)) {
            let _ = writeln!(out, "{label},{name},{}", v.map(|x| x.to_string()).unwrap_or_default());
        }
    };
    for c in &report.per_criterion {
        rows(c.criterion_id.as_str(), &c.metrics);
    }
    rows("AVERAGE", &report.macro_avg);
    if let Some(t) = &report.trial {
        rows("TRIAL", &t.metrics);
    }
    out
}

pub fn render_json(report: &EvaluationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
