//! Tidy CSV tables behind the tradeoff bar chart, the accuracy curves and
//! the per-epoch delta-error terms.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use ramp_core::AttackNorm;

use crate::delta::read_delta_rows;
use crate::run::{read_metrics, read_report, run_id};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    TradeoffBars,
    AccuracyCurves,
    ErrorTerms,
}

impl FromStr for FigureKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "tradeoff_bars" => Ok(FigureKind::TradeoffBars),
            "accuracy_curves" => Ok(FigureKind::AccuracyCurves),
            "error_terms" => Ok(FigureKind::ErrorTerms),
            other => bail!("unknown figure kind {other:?} (tradeoff_bars, accuracy_curves, error_terms)"),
        }
    }
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FigureKind::TradeoffBars => "tradeoff_bars",
            FigureKind::AccuracyCurves => "accuracy_curves",
            FigureKind::ErrorTerms => "error_terms",
        })
    }
}

pub const TRADEOFF_HEADER: [&str; 4] = ["category", "metric", "value", "run_id"];
pub const CURVES_HEADER: [&str; 4] = ["epoch", "metric", "value", "run_id"];
pub const ERROR_TERMS_HEADER: [&str; 5] = ["epoch", "variance", "bias", "tau_bar", "predicted_diff"];

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    Ok(w)
}

/// Writes the CSV files for `kind` into `out_dir` and returns their paths.
///
/// `tradeoff_bars` and `accuracy_curves` produce one combined file;
/// `error_terms` produces `error_terms_<run-id>.csv` per run (a header-only
/// `error_terms.csv` when no runs are given).
pub fn emit_figure_data(kind: FigureKind, run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    match kind {
        FigureKind::TradeoffBars => {
            let path = out_dir.join("tradeoff_bars.csv");
            let mut w = writer(&path, &TRADEOFF_HEADER)?;
            for dir in run_dirs {
                let report = read_report(dir)?;
                let id = run_id(dir);
                let rows = [
                    ("Linf", report.acc(AttackNorm::Linf)),
                    ("L1", report.acc(AttackNorm::L1)),
                    ("L2", report.acc(AttackNorm::L2)),
                    ("Union", report.union_acc),
                ];
                for (cat, v) in rows {
                    w.write_record([cat, "robust_acc", &v.to_string(), &id])?;
                }
            }
            w.flush()?;
            Ok(vec![path])
        }
        FigureKind::AccuracyCurves => {
            let path = out_dir.join("accuracy_curves.csv");
            let mut w = writer(&path, &CURVES_HEADER)?;
            for dir in run_dirs {
                let id = run_id(dir);
                for line in read_metrics(dir)? {
                    let e = line.epoch.to_string();
                    w.write_record([e.as_str(), "train_loss", &line.train_loss.to_string(), &id])?;
                    let accs = [
                        ("clean_acc", line.clean_acc),
                        ("l1_acc", line.l1_acc),
                        ("l2_acc", line.l2_acc),
                        ("linf_acc", line.linf_acc),
                        ("union_acc", line.union_acc),
                    ];
                    for (name, v) in accs {
                        if let Some(v) = v {
                            w.write_record([e.as_str(), name, &v.to_string(), &id])?;
                        }
                    }
                }
            }
            w.flush()?;
            Ok(vec![path])
        }
        FigureKind::ErrorTerms => {
            if run_dirs.is_empty() {
                let path = out_dir.join("error_terms.csv");
                writer(&path, &ERROR_TERMS_HEADER)?.flush()?;
                return Ok(vec![path]);
            }
            let mut paths = Vec::with_capacity(run_dirs.len());
            for dir in run_dirs {
                let path = out_dir.join(format!("error_terms_{}.csv", run_id(dir)));
                let mut w = writer(&path, &ERROR_TERMS_HEADER)?;
                let rows = read_delta_rows(dir)
                    .with_context(|| format!("{} has no delta terms; run delta-analysis first", dir.display()))?;
                for r in rows {
                    w.write_record([
                        r.epoch.to_string(),
                        r.variance.to_string(),
                        r.bias.to_string(),
                        r.tau_bar.to_string(),
                        r.predicted_diff.to_string(),
                    ])?;
                }
                w.flush()?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}
