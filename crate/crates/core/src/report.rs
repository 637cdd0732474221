//! JSON and CSV emitters for experiment bundles.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{LearningTrace, Method, ReportBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Accuracy table: one row per condition, one column per method, cells
/// `mean±std` in percent. BNCA cells get a trailing `*` when the paired
/// test against the strongest baseline has p < 0.05.
pub fn accuracy_table(bundle: &ReportBundle) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut conditions = Vec::new();
    for row in &bundle.rows {
        if !methods.contains(&row.method) {
            methods.push(row.method);
        }
        if !conditions.contains(&row.condition) {
            conditions.push(row.condition);
        }
    }
    let mut out = String::from("condition");
    for m in &methods {
        out.push(',');
        out.push_str(m.name());
    }
    out.push('\n');
    for cond in &conditions {
        out.push_str(&cond.label());
        for m in &methods {
            out.push(',');
            if let Some(row) = bundle.row(*m, cond) {
                let a = &row.accuracy;
                out.push_str(&format!("{:.2}±{:.2}", 100.0 * a.mean, 100.0 * a.std));
                if a.p_value_vs_baseline.is_some_and(|p| p < 0.05) {
                    out.push('*');
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn trace_csv(trace: &LearningTrace) -> String {
    let mut out = String::from("iter,objective,train_acc,test_acc\n");
    for r in &trace.rows {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.objective, r.train_acc, r.test_acc));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the bundle and returns every file created. The CSV format also
/// writes one `<stem>.trace.<method>.<n>.csv` per learning trace next to
/// the table, numbered in bundle order.
pub fn emit_report(bundle: &ReportBundle, format: ReportFormat, path: &Path) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(bundle)?;
            write(path, &(text + "\n"))?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            write(path, &accuracy_table(bundle))?;
            let mut written = vec![path.to_path_buf()];
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let dir = path.parent().unwrap_or(Path::new(""));
            for (n, trace) in bundle.traces.iter().enumerate() {
                let p = dir.join(format!("{stem}.trace.{}.{n}.csv", trace.method));
                write(&p, &trace_csv(trace))?;
                written.push(p);
            }
            Ok(written)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bundle_gives_header_only() {
        assert_eq!(accuracy_table(&ReportBundle::default()), "condition\n");
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
