//! Metrics and trace files.

use std::fmt::Write as _;

use ecga_core::metrics::MetricsReport;
use ecga_core::train::EpochRecord;

/// `key=value` lines, one metric per line, values at full precision.
pub fn metrics_kv(report: &MetricsReport, labels: &[String]) -> String {
    let mut out = String::new();
    let examples: u64 = report.confusion.iter().flatten().sum();
    let mut kv = |k: &str, v: &dyn std::fmt::Debug| writeln!(out, "{k}={v:?}").unwrap();
    kv("examples", &examples);
    kv("accuracy", &report.accuracy);
    kv("error_rate", &report.error_rate);
    kv("macro_f1", &report.macro_f1);
    kv("positive_f1", &report.positive_f1);
    for (i, s) in report.per_class.iter().enumerate() {
        kv(&format!("class.{i}.precision"), &s.precision);
        kv(&format!("class.{i}.recall"), &s.recall);
        kv(&format!("class.{i}.f1"), &s.f1);
        kv(&format!("class.{i}.support"), &s.support);
    }
    for (t, row) in report.confusion.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            kv(&format!("confusion.{t}.{p}"), n);
        }
    }
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, "class.{i}.label={}", l.replace(['\n', '\r'], " ")).unwrap();
    }
    out
}

/// Parses a `key=value` file back into ordered pairs.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

pub fn metrics_table(report: &MetricsReport, labels: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "accuracy     {:.4}", report.accuracy).unwrap();
    writeln!(out, "error rate   {:.4}", report.error_rate).unwrap();
    writeln!(out, "macro F1     {:.4}", report.macro_f1).unwrap();
    if report.per_class.len() == 2 {
        writeln!(out, "positive F1  {:.4}", report.positive_f1).unwrap();
    }
    let width = labels.iter().map(|l| l.chars().count()).max().unwrap_or(5).max(5);
    writeln!(
        out,
        "{:<width$}  precision  recall     f1  support",
        "class"
    )
    .unwrap();
    for (l, s) in labels.iter().zip(&report.per_class) {
        writeln!(
            out,
            "{l:<width$}  {:>9.4}  {:>6.4}  {:>5.4}  {:>7}",
            s.precision, s.recall, s.f1, s.support
        )
        .unwrap();
    }
    out
}

pub const TRACE_HEADER: &str = "run\tepoch\tloss\ttrain_accuracy\tvalidation_accuracy\tvalidation_macro_f1\n";

/// Appends one tab-separated row per epoch, tagged with `run`.
pub fn trace_rows(out: &mut String, run: &str, records: &[EpochRecord]) {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:?}"));
    for r in records {
        writeln!(
            out,
            "{run}\t{}\t{:?}\t{:?}\t{}\t{}",
            r.epoch,
            r.loss,
            r.train_accuracy,
            opt(r.validation_accuracy),
            opt(r.validation_macro_f1)
        )
        .unwrap();
    }
}
