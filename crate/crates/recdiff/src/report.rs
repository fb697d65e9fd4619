//! Report emission: line-delimited record files with a one-line header,
//! fixed-width text tables, and run identifiers. Float formatting is
//! pinned so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::metrics::MetricSet;
use crate::rng::fnv1a;
use crate::train::EpochRecord;

/// Canonical float rendering for report files.
pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Short stable identifier for a run configuration.
pub fn config_hash(canonical_text: &str, dataset: &str, seed: u64) -> String {
    let mut payload = String::with_capacity(canonical_text.len() + dataset.len() + 24);
    payload.push_str(canonical_text);
    payload.push_str(dataset);
    let _ = write!(payload, "seed={seed}");
    format!("{:016x}", fnv1a(payload.as_bytes()))
}

/// Write a record file: tab-separated, one header line naming fields.
pub fn write_records(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fixed-width table for terminal output.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.len());
            }
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize], out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:>width$}", width = widths[i]);
        }
        out.push('\n');
    };
    let header_cells: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    fmt_row(&header_cells, &widths, &mut out);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len().saturating_sub(1));
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        fmt_row(row, &widths, &mut out);
    }
    out
}

/// Header and row layout of the per-epoch training log.
pub fn epoch_log_header(ns: &[usize]) -> Vec<String> {
    let mut h = vec![
        "epoch".to_string(),
        "loss_total".to_string(),
        "loss_bpr".to_string(),
        "loss_diffusion".to_string(),
        "epoch_time_s".to_string(),
    ];
    for &n in ns {
        h.push(format!("valid_recall@{n}"));
        h.push(format!("valid_ndcg@{n}"));
    }
    h
}

pub fn epoch_log_row(r: &EpochRecord, ns: &[usize]) -> Vec<String> {
    let mut row = vec![
        r.epoch.to_string(),
        fmt6(r.loss_total),
        fmt6(r.loss_bpr),
        fmt6(r.loss_diffusion),
        fmt6(r.epoch_time_s),
    ];
    for &n in ns {
        match &r.valid {
            Some(m) => {
                row.push(fmt6(m.recall(n)));
                row.push(fmt6(m.ndcg(n)));
            }
            None => {
                row.push("-".to_string());
                row.push("-".to_string());
            }
        }
    }
    row
}

/// Final-metrics rows in Tables-2/3 layout: one row per cutoff.
pub fn metrics_rows(label: &str, metrics: &MetricSet) -> Vec<Vec<String>> {
    metrics
        .per_n
        .iter()
        .map(|(n, m)| {
            vec![label.to_string(), n.to_string(), fmt6(m.recall), fmt6(m.ndcg)]
        })
        .collect()
}
