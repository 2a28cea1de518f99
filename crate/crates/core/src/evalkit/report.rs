//! Sweep tables, per-item score files and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::{EvalError, ItemScore, MetricReport};
use crate::io::{to_jsonl, write_atomic};
use crate::pipelines::PipelineKind;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

type Metric<T> = (&'static str, fn(&MetricReport<T>) -> Option<T>);

fn metrics<T: Scalar>() -> [Metric<T>; 6] {
    [
        ("em", |r| r.aggregates.em),
        ("f1", |r| r.aggregates.f1),
        ("a_em", |r| r.aggregates.a_em),
        ("a_f1", |r| r.aggregates.a_f1),
        ("accuracy", |r| r.aggregates.accuracy),
        ("matching_f1", |r| r.matching_f1),
    ]
}

fn cell<T: Scalar>(value: Option<T>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v.to_f64().unwrap_or(f64::NAN)))
}

/// Tab-separated table, one row per (pipeline, k_or_m), sorted.
pub fn sweep_table<T: Scalar>(reports: &[MetricReport<T>]) -> String {
    let mut sorted: Vec<&MetricReport<T>> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.pipeline, r.k_or_m));
    let mut out = String::from("pipeline\tk_or_m\titems");
    for (name, _) in metrics::<T>() {
        out.push('\t');
        out.push_str(name);
    }
    out.push_str("\tfallbacks\tfailures\n");
    for report in sorted {
        let _ = write!(out, "{}\t{}\t{}", report.pipeline, report.k_or_m, report.per_item.len());
        for (_, pick) in metrics::<T>() {
            out.push('\t');
            out.push_str(&cell(pick(report)));
        }
        let _ = writeln!(out, "\t{}\t{}", report.counts.fallbacks, report.counts.failures);
    }
    out
}

#[derive(Serialize)]
struct ScoreLine<'a, T> {
    pipeline: PipelineKind,
    k_or_m: usize,
    #[serde(flatten)]
    score: &'a ItemScore<T>,
}

/// Writes every per-item score as one JSON line.
pub fn write_scores<T: Scalar>(reports: &[MetricReport<T>], path: &Path) -> Result<(), EvalError> {
    let lines: Vec<ScoreLine<'_, T>> = reports
        .iter()
        .flat_map(|r| {
            r.per_item.iter().map(move |score| ScoreLine {
                pipeline: r.pipeline,
                k_or_m: r.k_or_m,
                score,
            })
        })
        .collect();
    write_atomic(path, &to_jsonl(&lines)?)?;
    Ok(())
}

fn plot(metric: &str, series: &BTreeMap<PipelineKind, Vec<(f64, f64)>>) -> Result<String, Box<dyn std::error::Error>> {
    let mut svg = String::new();
    let xs = series.values().flatten().map(|(x, _)| *x);
    let x_min = xs.clone().fold(f64::INFINITY, f64::min);
    let x_max = xs.fold(f64::NEG_INFINITY, f64::max);
    let x_max = if x_max <= x_min { x_min + 1.0 } else { x_max };
    let root = SVGBackend::with_string(&mut svg, (640, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(44)
        .build_cartesian_2d(x_min..x_max, 0.0..1.0)?;
    chart.configure_mesh().x_desc("k or m").y_desc(metric).draw()?;
    for (idx, (pipeline, points)) in series.iter().enumerate() {
        let color = Palette99::pick(idx).to_rgba();
        // A run without a sweep parameter is drawn flat across the range.
        let points = if points.iter().all(|(x, _)| *x == 0.0) && x_max > 0.0 {
            vec![(x_min, points[0].1), (x_max, points[0].1)]
        } else {
            points.clone()
        };
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))?
            .label(pipeline.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    drop(chart);
    drop(root);
    Ok(svg)
}

/// Writes `sweep.tsv` and one `<metric>.svg` per metric present into `dir`.
pub fn sweep_report<T: Scalar>(reports: &[MetricReport<T>], dir: &Path) -> Result<SweepFiles, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRecords);
    }
    std::fs::create_dir_all(dir).map_err(|e| crate::io::IoError::io(dir, e))?;
    let table = dir.join("sweep.tsv");
    write_atomic(&table, sweep_table(reports).as_bytes())?;
    let mut plots = Vec::new();
    for (name, pick) in metrics::<T>() {
        let mut series: BTreeMap<PipelineKind, Vec<(f64, f64)>> = BTreeMap::new();
        for report in reports {
            if let Some(value) = pick(report) {
                series
                    .entry(report.pipeline)
                    .or_default()
                    .push((report.k_or_m as f64, value.to_f64().unwrap_or(0.0)));
            }
        }
        if series.is_empty() {
            continue;
        }
        for points in series.values_mut() {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let path = dir.join(format!("{name}.svg"));
        let svg = plot(name, &series).map_err(|e| EvalError::Plot {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        write_atomic(&path, svg.as_bytes())?;
        plots.push(path);
    }
    Ok(SweepFiles { table, plots })
}
