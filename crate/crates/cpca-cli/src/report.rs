//! The `report` command: comparison tables from metric records and charts
//! from training logs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cpca_core::metrics::{format_table, MetricReport};
use cpca_core::proto::momentum;
use cpca_core::trainer::TrainConfig;

use crate::plot::{render_chart, Series};

/// Parse a training-log CSV into (header, rows).
pub fn read_log(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .context("empty log file")?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|v| v.parse::<f64>()).collect();
        let row = row.with_context(|| format!("{}:{}: bad number", path.display(), i + 2))?;
        anyhow::ensure!(
            row.len() == header.len(),
            "{}:{}: {} fields, header has {}",
            path.display(),
            i + 2,
            row.len(),
            header.len()
        );
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Option<Vec<(f64, f64)>> {
    let idx = header.iter().position(|h| h == name)?;
    let it = header.iter().position(|h| h == "iteration")?;
    Some(rows.iter().map(|r| (r[it], r[idx])).collect())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loss series worth plotting from one log: every loss column that is not
/// identically zero.
pub fn loss_series(path: &Path) -> Result<Vec<Series>> {
    let (header, rows) = read_log(path)?;
    let mut out = Vec::new();
    for name in ["total", "l_seg", "l_cc", "l_c", "l_b"] {
        if let Some(points) = column(&header, &rows, name) {
            if points.iter().any(|&(_, v)| v != 0.0) {
                out.push(Series {
                    label: format!("{}:{}", stem(path), name),
                    points,
                });
            }
        }
    }
    Ok(out)
}

/// The momentum annealing schedule over the full adaptation horizon,
/// including both endpoints.
pub fn momentum_series(cfg: &TrainConfig) -> Series {
    let total = cfg.adapt.iterations;
    let points = (0..=total)
        .map(|t| (t as f64, momentum(t, total, cfg.m0, cfg.alpha)))
        .collect();
    Series {
        label: "m".to_string(),
        points,
    }
}

pub struct ReportArtifacts {
    pub table: Option<PathBuf>,
    pub loss_chart: Option<PathBuf>,
    pub momentum_chart: Option<PathBuf>,
}

/// Build every artifact the inputs allow.
pub fn build_report(
    out_dir: &Path,
    metric_files: &[PathBuf],
    log_files: &[PathBuf],
    train_cfg: Option<&TrainConfig>,
) -> Result<ReportArtifacts> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut artifacts = ReportArtifacts {
        table: None,
        loss_chart: None,
        momentum_chart: None,
    };

    if !metric_files.is_empty() {
        let mut runs = Vec::new();
        for path in metric_files {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let report = MetricReport::from_record(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            runs.push((stem(path), report));
        }
        let table = format_table(&runs)?;
        let path = out_dir.join("report_table.txt");
        cpca_core::data::write_atomic(&path, table.as_bytes())?;
        print!("{table}");
        artifacts.table = Some(path);
    }

    if !log_files.is_empty() {
        let mut series = Vec::new();
        for path in log_files {
            series.extend(loss_series(path)?);
        }
        if !series.is_empty() {
            let path = out_dir.join("loss_curves.png");
            render_chart("TRAINING LOSSES", &series, &path)?;
            artifacts.loss_chart = Some(path);
        }
    }

    let momentum = match train_cfg {
        Some(cfg) => Some(momentum_series(cfg)),
        None => {
            // fall back to a logged m column if any log carries one
            let mut found = None;
            for path in log_files {
                let (header, rows) = read_log(path)?;
                if let Some(points) = column(&header, &rows, "m") {
                    if points.iter().any(|&(_, v)| v != 0.0) {
                        found = Some(Series {
                            label: format!("{}:m", stem(path)),
                            points,
                        });
                        break;
                    }
                }
            }
            found
        }
    };
    if let Some(series) = momentum {
        let path = out_dir.join("momentum_schedule.png");
        render_chart("MOMENTUM SCHEDULE", &[series], &path)?;
        artifacts.momentum_chart = Some(path);
    }
    Ok(artifacts)
}
