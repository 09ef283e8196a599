//! Figure-ready artifact writers: RFC-4180 CSV and pretty JSON.
//!
//! Every writer is deterministic — same inputs, same bytes — because re-run
//! reproducibility is checked at the byte level. Floats are rendered in
//! scientific notation with 9 significant digits and a `.` decimal
//! separator; records end with CRLF per RFC 4180.

use std::path::Path;

use serde::Serialize;

use crate::evaluation::{CurvePair, SimilarityReport, ThresholdCell};
use crate::{Error, Result};

/// 9 significant digits, scientific notation: `-3.14159265e0`.
pub fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// RFC-4180 escaping: fields containing commas, quotes, or line breaks are
/// quoted, with inner quotes doubled.
pub fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes one CSV file; pass an empty header to omit the header record.
pub fn write_csv<P: AsRef<Path>>(
    path: P,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = String::new();
    if !header.is_empty() {
        out.push_str(&header.iter().map(|h| csv_escape(h)).collect::<Vec<_>>().join(","));
        out.push_str("\r\n");
    }
    for row in rows {
        out.push_str(&row.iter().map(|f| csv_escape(f)).collect::<Vec<_>>().join(","));
        out.push_str("\r\n");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `curves.csv`: one row per (ranking, k).
pub fn write_curves_csv<P: AsRef<Path>>(path: P, pairs: &[(String, CurvePair)]) -> Result<()> {
    let mut rows = Vec::new();
    for (name, pair) in pairs {
        if pair.faithfulness.len() != pair.completeness.len() {
            return Err(Error::shape("curve lengths differ".to_string()));
        }
        for (k, (f, c)) in pair.faithfulness.iter().zip(&pair.completeness).enumerate() {
            rows.push(vec![k.to_string(), sig9(*f), sig9(*c), name.clone()]);
        }
    }
    write_csv(path, &["k", "faithfulness", "completeness", "ranking_name"], &rows)
}

/// `minheads.csv`: the `k` field is empty when the criterion is never met.
pub fn write_minheads_csv<P: AsRef<Path>>(path: P, cells: &[ThresholdCell]) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.ranking.clone(),
                c.criterion.to_string(),
                sig9(c.threshold),
                c.min_heads.map(|k| k.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &["ranking", "criterion", "threshold", "k"], &rows)
}

/// `headsim.csv`: all N² ordered pairs.
pub fn write_headsim_csv<P: AsRef<Path>>(path: P, report: &SimilarityReport) -> Result<()> {
    let mut rows = Vec::new();
    for (i, row) in report.cosine.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            rows.push(vec![i.to_string(), j.to_string(), sig9(*c)]);
        }
    }
    write_csv(path, &["i", "j", "cosine"], &rows)
}

/// Header-less numeric grid — one CSV record per grid row.
pub fn write_grid_csv<P: AsRef<Path>>(path: P, grid: &[Vec<f64>]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        grid.iter().map(|r| r.iter().map(|v| sig9(*v)).collect()).collect();
    write_csv(path, &[], &rows)
}

/// Scatter export: one row per component with two paired values.
pub fn write_scatter_csv<P: AsRef<Path>>(
    path: P,
    columns: [&str; 3],
    rows: &[(usize, f64, f64)],
) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(i, a, b)| vec![i.to_string(), sig9(*a), sig9(*b)])
        .collect();
    write_csv(path, &columns, &body)
}

/// Pretty JSON with a trailing newline. Serialization order follows struct
/// field order, so identical values produce identical bytes.
pub fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(format!("json encode: {e}")))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
