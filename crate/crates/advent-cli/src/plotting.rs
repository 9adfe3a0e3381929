//! SVG line charts of per-epoch metrics.

use std::collections::HashMap;
use std::path::Path;

use plotters::prelude::*;

use crate::CliError;

pub const METRIC_KEYS: [&str; 5] = ["miou", "mpre", "mrec", "mf1", "loss"];

/// Parses `key=value` metric lines into one map per line.
pub fn parse_metric_lines(text: &str) -> Vec<HashMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .filter_map(|tok| tok.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

/// Extracts one metric's (epoch, value) curve for a split from metric lines.
pub fn metric_curve(
    lines: &[HashMap<String, String>],
    split: &str,
    metric: &str,
) -> Vec<(f64, f64)> {
    lines
        .iter()
        .filter(|m| m.get("split").map(String::as_str) == Some(split))
        .filter_map(|m| {
            let epoch: f64 = m.get("epoch")?.parse().ok()?;
            let value: f64 = m.get(metric)?.parse().ok()?;
            Some((epoch, value))
        })
        .collect()
}

/// Renders one SVG line chart with a legend; one series per label.
pub fn line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<(), CliError> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    if points.is_empty() {
        return Err(CliError::Runtime(format!(
            "no data points to plot for {title}"
        )));
    }
    let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let (mut y_min, mut y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if (y_max - y_min).abs() < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = (y_max - y_min) * 0.05;

    let path_str = path.to_string_lossy().to_string();
    let root = SVGBackend::new(&path_str, (800, 500)).into_drawing_area();
    let draw = |e: &mut ChartBuilder<SVGBackend>| -> Result<(), Box<dyn std::error::Error>> {
        let mut chart = e
            .caption(title, ("sans-serif", 24))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(55)
            .build_cartesian_2d(1.0..x_max, (y_min - pad)..(y_max + pad))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(y_label)
            .draw()?;
        for (i, (label, data)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(data.iter().copied(), color.stroke_width(2)))?
                .label(label.clone())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()?;
        Ok(())
    };
    root.fill(&WHITE)
        .map_err(|e| CliError::Runtime(format!("plot fill failed: {e}")))?;
    draw(&mut ChartBuilder::on(&root))
        .map_err(|e| CliError::Runtime(format!("plot render failed: {e}")))?;
    root.present()
        .map_err(|e| CliError::Runtime(format!("cannot write plot {path_str}: {e}")))?;
    Ok(())
}

/// Plots one metric from a run directory's metrics.txt.
pub fn plot_run(run_dir: &Path, metric: &str, out: &Path) -> Result<(), CliError> {
    if !METRIC_KEYS.contains(&metric) {
        return Err(CliError::Usage(format!(
            "unknown metric `{metric}`; expected one of {}",
            METRIC_KEYS.join(", ")
        )));
    }
    let metrics_path = run_dir.join("metrics.txt");
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| {
        CliError::Usage(format!("cannot read {}: {e}", metrics_path.display()))
    })?;
    let lines = parse_metric_lines(&text);
    let mut series = Vec::new();
    for split in ["train", "val"] {
        let curve = metric_curve(&lines, split, metric);
        if !curve.is_empty() {
            series.push((split.to_string(), curve));
        }
    }
    line_chart(out, &format!("{metric} vs epoch"), metric, &series)
}
