//! Result rows and the trial-averaged results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use planting::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::experiment::RESULT_FILE;

/// Table order: teacher first, the planted network last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Teacher,
    Initial,
    Student,
    Planted,
}

/// One trained network evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: NetworkKind,
    pub network: String,
    pub loss_func: String,
    pub trial: usize,
    pub params: usize,
    /// Mean test cross-entropy.
    pub test_loss: f64,
    /// Test accuracy in percent.
    pub test_acc: f64,
    pub config_hash: String,
}

/// Trial average of the rows sharing a network label and loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub network: String,
    pub loss_func: String,
    pub trials: usize,
    pub params: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

fn find_results(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_results(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == RESULT_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

/// Every result row under `out`, in path order.
pub fn collect_rows(out: &Path) -> Result<Vec<ResultRow>> {
    let mut files = Vec::new();
    find_results(out, &mut files)?;
    let mut rows = Vec::new();
    for path in files {
        let mut r =
            csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
        for row in r.deserialize() {
            let row: ResultRow =
                row.with_context(|| format!("malformed result row in {}", path.display()))?;
            ensure!(
                row.test_acc.is_finite() && row.test_loss.is_finite(),
                "non-finite metrics in {}",
                path.display()
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Averages rows over trials. All rows must come from one config.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<ReportRow>> {
    ensure!(!rows.is_empty(), "no result rows to report");
    let hash = &rows[0].config_hash;
    if let Some(other) = rows.iter().find(|r| &r.config_hash != hash) {
        anyhow::bail!(
            "results from different configs ({hash} and {}) cannot share a report",
            other.config_hash
        );
    }
    let mut groups: BTreeMap<(NetworkKind, usize, String, String), Vec<&ResultRow>> =
        BTreeMap::new();
    for r in rows {
        // students are ordered by width; the first group row fixes the key
        let order = if r.kind == NetworkKind::Student {
            r.params
        } else {
            0
        };
        groups
            .entry((r.kind, order, r.network.clone(), r.loss_func.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((_, _, network, loss_func), members)| {
            let n = members.len() as f64;
            let mean = |f: fn(&ResultRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            ReportRow {
                network,
                loss_func,
                trials: members.len(),
                params: mean(|r| r.params as f64),
                test_loss: mean(|r| r.test_loss),
                test_acc: mean(|r| r.test_acc),
            }
        })
        .collect())
}

/// `40639.0` → `40.6K`, `1_195_466.0` → `1.2M`.
pub fn compact_count(n: f64) -> String {
    if n >= 1e6 {
        format!("{:.1}M", n / 1e6)
    } else {
        format!("{:.1}K", n / 1e3)
    }
}

pub fn to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// Aligned text table. The `test_loss` column is the mean test
/// cross-entropy, not an error rate.
pub fn to_text(rows: &[ReportRow]) -> String {
    let header = [
        "network",
        "params",
        "exact params",
        "test_loss",
        "test_acc",
        "loss_func",
        "trials",
    ];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.network.clone(),
                compact_count(r.params),
                format!("{:.1}", r.params),
                format!("{:.4}", r.test_loss),
                format!("{:.2}%", r.test_acc),
                r.loss_func.clone(),
                r.trials.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header.map(String::from));
    for row in &cells {
        line(row);
    }
    out
}

/// Writes `report.csv` and `report.txt` under `out`. Returns the text form.
pub fn report(out: &Path) -> Result<String> {
    let rows = aggregate(&collect_rows(out)?)?;
    let text = to_text(&rows);
    write_atomic(&out.join("report.csv"), &to_csv(&rows)?)?;
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    Ok(text)
}
