//! Experiment-matrix runner: results table, per-cell summary, accuracy
//! curves and their chart.

use std::fs;
use std::path::Path;
use std::time::Instant;

use cdgan_core::data::MultiDomainDataset;
use cdgan_core::eval::{run_cell, EvalSettings, ExperimentMatrix, JudgeClassifier};
use serde::{Deserialize, Serialize};

use crate::chart::{line_chart, Series};
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CHART_FILE: &str = "accuracy.png";
pub const LEGEND_FILE: &str = "accuracy_legend.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell_name: String,
    pub seed: u64,
    /// NaN when the cell failed.
    pub accuracy: f64,
    pub judge_real_accuracy: f64,
    pub iterations: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub cell_name: String,
    pub seed: u64,
    pub iteration: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell_name: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over successful runs (0 for a single run).
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixRun {
    pub results: Vec<ResultRow>,
    pub curves: Vec<CurveRow>,
}

/// Runs every cell for every seed, in matrix order. A failing cell is logged
/// and recorded with NaN accuracy; the matrix carries on.
pub fn run_matrix(
    matrix: &ExperimentMatrix,
    data: &MultiDomainDataset,
    judge: &JudgeClassifier,
    eval: &EvalSettings,
    curve_every: Option<u64>,
) -> Result<MatrixRun> {
    matrix.validate()?;
    judge.ensure_usable()?;
    let mut run = MatrixRun::default();
    for cell in &matrix.cells {
        for &seed in &matrix.seeds {
            log::info!("cell {:?} seed {seed}", cell.name);
            let started = Instant::now();
            let outcome = run_cell(cell, seed, data, judge, eval, curve_every);
            let wall_seconds = started.elapsed().as_secs_f64();
            let (accuracy, iterations) = match outcome {
                Ok(o) => {
                    run.curves.extend(o.curve.iter().map(|&(iteration, accuracy)| CurveRow {
                        cell_name: cell.name.clone(),
                        seed,
                        iteration,
                        accuracy,
                    }));
                    (o.accuracy, o.iterations)
                }
                Err(e) => {
                    log::error!("cell {:?} seed {seed} failed: {e}", cell.name);
                    (f64::NAN, 0)
                }
            };
            log::info!("cell {:?} seed {seed}: accuracy {accuracy:.4} in {wall_seconds:.1}s", cell.name);
            run.results.push(ResultRow {
                cell_name: cell.name.clone(),
                seed,
                accuracy,
                judge_real_accuracy: judge.real_test_accuracy(),
                iterations,
                wall_seconds,
            });
        }
    }
    Ok(run)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per cell, in first-appearance order.
pub fn summarize(results: &[ResultRow]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.cell_name.as_str()) {
            names.push(&r.cell_name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&ResultRow> = results.iter().filter(|r| r.cell_name == name).collect();
            let ok: Vec<f64> = rows.iter().map(|r| r.accuracy).filter(|a| a.is_finite()).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&ok);
            SummaryRow {
                cell_name: name.to_string(),
                runs: rows.len(),
                failed: rows.len() - ok.len(),
                mean_accuracy,
                std_accuracy,
            }
        })
        .collect()
}

/// Human-readable `name  mean ± std` lines.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let width = summary.iter().map(|s| s.cell_name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for s in summary {
        out.push_str(&format!(
            "{:width$}  {:.4} ± {:.4}  ({} runs{})\n",
            s.cell_name,
            s.mean_accuracy,
            s.std_accuracy,
            s.runs,
            if s.failed > 0 { format!(", {} failed", s.failed) } else { String::new() },
        ));
    }
    out
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_rows(
        path,
        &["cell_name", "seed", "accuracy", "judge_real_accuracy", "iterations", "wall_seconds"],
        rows,
    )
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(path, &["cell_name", "runs", "failed", "mean_accuracy", "std_accuracy"], rows)
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_rows(path, &["cell_name", "seed", "iteration", "accuracy"], rows)
}

/// Seed-averaged accuracy per cell and iteration.
pub fn mean_curves(curves: &[CurveRow]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for row in curves {
        if !out.iter().any(|s| s.label == row.cell_name) {
            out.push(Series {
                label: row.cell_name.clone(),
                points: Vec::new(),
            });
        }
    }
    for s in &mut out {
        let mut iters: Vec<u64> = curves
            .iter()
            .filter(|r| r.cell_name == s.label)
            .map(|r| r.iteration)
            .collect();
        iters.sort_unstable();
        iters.dedup();
        s.points = iters
            .into_iter()
            .map(|it| {
                let vals: Vec<f64> = curves
                    .iter()
                    .filter(|r| r.cell_name == s.label && r.iteration == it && r.accuracy.is_finite())
                    .map(|r| r.accuracy)
                    .collect();
                (it as f64, mean_std(&vals).0)
            })
            .filter(|p| p.1.is_finite())
            .collect();
    }
    out
}

/// Writes results, summary, curves, chart and legend into `out`.
pub fn write_outputs(out: &Path, run: &MatrixRun) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_results(&out.join(RESULTS_FILE), &run.results)?;
    let summary = summarize(&run.results);
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    write_curves(&out.join(CURVES_FILE), &run.curves)?;
    let series = mean_curves(&run.curves);
    let chart = out.join(CHART_FILE);
    line_chart(&series).save(&chart).map_err(|source| Error::Image { path: chart, source })?;
    let legend: String = series
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{} {}\n", i + 1, s.label))
        .collect();
    let legend_path = out.join(LEGEND_FILE);
    fs::write(&legend_path, legend).map_err(|e| Error::io(&legend_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, seed: u64, accuracy: f64) -> ResultRow {
        ResultRow {
            cell_name: name.into(),
            seed,
            accuracy,
            judge_real_accuracy: 1.0,
            iterations: 10,
            wall_seconds: 0.5,
        }
    }

    #[test]
    fn summary_ignores_failed_runs() {
        let s = summarize(&[row("a", 0, 0.5), row("a", 1, 0.7), row("b", 0, f64::NAN), row("a", 2, f64::NAN)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].cell_name, "a");
        assert_eq!((s[0].runs, s[0].failed), (3, 1));
        assert!((s[0].mean_accuracy - 0.6).abs() < 1e-12);
        assert!((s[0].std_accuracy - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(s[1].mean_accuracy.is_nan());
        assert!(format_summary(&s).contains("1 failed"));
    }

    #[test]
    fn results_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row("Baseline + R", 0, 0.25), row("Baseline, quoted", 1, f64::NAN)];
        write_results(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("cell_name,seed,accuracy,judge_real_accuracy,iterations,wall_seconds\n"));
        let back = read_results(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].accuracy.is_nan());
    }

    #[test]
    fn empty_run_writes_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_outputs(dir.path(), &MatrixRun::default()).unwrap();
        assert!(summary.is_empty());
        let text = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(dir.path().join(CHART_FILE).exists());
    }

    #[test]
    fn mean_curves_average_over_seeds() {
        let c = |seed, iteration, accuracy| CurveRow {
            cell_name: "x".into(),
            seed,
            iteration,
            accuracy,
        };
        let s = mean_curves(&[c(0, 5, 0.2), c(1, 5, 0.4), c(0, 10, 1.0), c(1, 10, f64::NAN)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points.len(), 2);
        assert!((s[0].points[0].1 - 0.3).abs() < 1e-12);
        assert_eq!(s[0].points[1], (10.0, 1.0));
    }
}
