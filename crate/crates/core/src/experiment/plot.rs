//! Static SVG output: Fisher heatmaps and accuracy-versus-task curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde_json::Value;

use super::runner::{Aggregate, RunRecord};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap of `|a|`, scaled linearly so the largest magnitude is 1.
///
/// Each entry is one `<rect class="cell">` whose `data-v` attribute holds
/// the normalized value; darker is larger.
pub fn heatmap_svg(a: &Matrix, title: &str) -> String {
    let (rows, cols) = a.shape();
    let cell = (480.0 / rows.max(cols).max(1) as f64).clamp(1.0, 24.0);
    let (w, h) = (cols as f64 * cell, rows as f64 * cell);
    let peak = a.max_abs();
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        w + 20.0,
        h + 40.0,
        w + 20.0,
        h + 40.0
    );
    let _ = write!(
        s,
        r#"<text x="10" y="20" font-size="14" font-family="sans-serif">{}</text>"#,
        escape(title)
    );
    for i in 0..rows {
        for j in 0..cols {
            let v = if peak > 0.0 {
                a.as_slice()[i * cols + j].abs() / peak
            } else {
                0.0
            };
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = write!(
                s,
                r#"<rect class="cell" data-v="{v:.6}" x="{:.3}" y="{:.3}" width="{cell:.3}" height="{cell:.3}" fill="rgb({shade},{shade},255)"/>"#,
                10.0 + j as f64 * cell,
                30.0 + i as f64 * cell,
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One labeled curve; `values[t]` is plotted at x = t + 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

/// Line plot of accuracy (in [0, 1], drawn as percent) against the number of
/// tasks learned.
pub fn accuracy_plot_svg(series: &[Series], title: &str) -> String {
    let (w, h, left, top, bottom) = (640.0, 400.0, 60.0, 40.0, 50.0);
    let legend_h = 18.0 * series.len() as f64;
    let plot_w = w - left - 30.0;
    let plot_h = h - top - bottom;
    let steps = series
        .iter()
        .map(|s| s.values.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let x = |t: usize| {
        if steps == 1 {
            left + plot_w / 2.0
        } else {
            left + plot_w * t as f64 / (steps - 1) as f64
        }
    };
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" viewBox="0 0 {w} {}">"#,
        h + legend_h,
        h + legend_h
    );
    let _ = write!(
        s,
        r#"<text x="{left}" y="24" font-size="14" font-family="sans-serif">{}</text>"#,
        escape(title)
    );
    let _ = write!(
        s,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="gray"/>"#
    );
    for pct in [0, 25, 50, 75, 100] {
        let yy = y(pct as f64 / 100.0);
        let _ = write!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end" font-family="sans-serif">{pct}%</text>"#,
            left - 6.0,
            yy + 4.0
        );
    }
    for t in 0..steps {
        let _ = write!(
            s,
            r#"<text class="xtick" x="{:.1}" y="{}" font-size="11" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            x(t),
            top + plot_h + 16.0,
            t + 1
        );
    }
    let _ = write!(
        s,
        r#"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">tasks learned</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 36.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.1},{:.1}", x(t), y(v)))
            .collect();
        let _ = write!(
            s,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&ser.label),
            points.join(" ")
        );
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted above");
            let _ = write!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = h + 18.0 * i as f64;
        let _ = write!(
            s,
            r#"<line x1="{left}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text class="legend" x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#,
            left + 24.0,
            left + 30.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_svg(path: PathBuf, svg: String, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Reads run or aggregate result files and writes their plots to `out`.
///
/// Aggregates contribute mean step-average curves; run records contribute
/// per-seed curves and, when they carry Fisher blocks, before/after
/// heatmaps. Files without the needed fields are skipped with a warning.
pub fn emit_plots(files: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut series = Vec::new();
    let mut written = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let value: Value = serde_json::from_str(&text)?;
        if value.get("records").is_some() {
            let agg: Aggregate = serde_json::from_value(value)?;
            for r in agg.records {
                if r.step_average_mean.is_empty() {
                    warn!(
                        "{}: {} has no completed runs; skipped",
                        file.display(),
                        r.method_label
                    );
                    continue;
                }
                series.push(Series {
                    label: r.method_label,
                    values: r.step_average_mean,
                });
            }
        } else if value.get("accuracy").is_some() {
            let run: RunRecord = serde_json::from_value(value)?;
            if !run.step_averages.is_empty() {
                series.push(Series {
                    label: format!("{} seed {}", run.method_label, run.seed),
                    values: run.step_averages.clone(),
                });
            }
            let stem = file
                .file_stem()
                .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            if run.energy.is_empty() {
                warn!(
                    "{}: no Fisher diagnostics; heatmaps skipped",
                    file.display()
                );
            }
            for e in &run.energy {
                let (Some(before), Some(after)) = (&e.fim_before, &e.fim_after) else {
                    warn!(
                        "{}: layer {} Fisher block not stored; heatmap skipped",
                        file.display(),
                        e.ordinal
                    );
                    continue;
                };
                for (tag, rows, ratio) in [
                    ("before", before, e.summary.ratio_before),
                    ("after", after, e.summary.ratio_after),
                ] {
                    let title = format!(
                        "layer {} Fisher block {tag} rotation, diagonal energy {:.1}%",
                        e.ordinal,
                        100.0 * ratio
                    );
                    let svg = heatmap_svg(&Matrix::from_rows(rows), &title);
                    write_svg(
                        out.join(format!("{stem}_layer{}_{tag}.svg", e.ordinal)),
                        svg,
                        &mut written,
                    )?;
                }
            }
        } else {
            warn!("{}: not a result file; skipped", file.display());
        }
    }
    if series.is_empty() {
        warn!("no accuracy curves to plot");
    } else {
        write_svg(
            out.join("accuracy.svg"),
            accuracy_plot_svg(&series, "average accuracy over learned tasks"),
            &mut written,
        )?;
    }
    Ok(written)
}
