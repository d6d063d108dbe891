//! Self-contained SVG line charts for the learning curves. Written directly
//! as text; no renderer dependency.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named series over epochs; gaps (None) are skipped.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn svg_chart(title: &str, series: &[Series]) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Domain(format!("no points to plot for {title}")));
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi == x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi == y_lo {
        y_hi = y_lo + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    // SVG y grows downward; invert so larger values sit higher.
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    // Range labels.
    svg.push_str(&format!(
        "  <text x=\"{m}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">{x_lo:.0}</text>\n",
        m = MARGIN,
        y = HEIGHT - MARGIN + 16.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{x_hi:.0}</text>\n",
        x = WIDTH - MARGIN,
        y = HEIGHT - MARGIN + 16.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{y_hi:.4}</text>\n",
        x = MARGIN - 4.0,
        y = MARGIN + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{y_lo:.4}</text>\n",
        x = MARGIN - 4.0,
        y = HEIGHT - MARGIN
    ));
    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        if s.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{}</text>\n",
            s.name,
            x = WIDTH - MARGIN - 150.0,
            y = MARGIN + 16.0 * (i + 1) as f64
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn epochs_series<'a>(
    name: &'a str,
    rows: &[MetricsRow],
    f: impl Fn(&MetricsRow) -> Option<f64>,
) -> Series<'a> {
    Series {
        name,
        points: rows
            .iter()
            .filter_map(|r| f(r).map(|y| (r.epoch as f64, y)))
            .collect(),
    }
}

/// Write the learning-curve SVGs: wci, loss-gap, err-gap, lr, and the
/// Cauchy–Schwarz factor sums, each against the epoch axis.
pub fn emit_plots(rows: &[MetricsRow], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Domain("no metrics rows to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let charts: Vec<(&str, String)> = vec![
        (
            "wci.svg",
            svg_chart(
                "weight-curvature index",
                &[epochs_series("wci", rows, |r| {
                    r.wci_eval.as_ref().map(|w| w.wci)
                })],
            )?,
        ),
        (
            "loss_gap.svg",
            svg_chart(
                "robust loss gap",
                &[epochs_series("loss gap", rows, |r| Some(r.loss_gap))],
            )?,
        ),
        (
            "err_gap.svg",
            svg_chart(
                "robust error gap",
                &[epochs_series("error gap", rows, |r| Some(r.err_gap))],
            )?,
        ),
        (
            "lr.svg",
            svg_chart(
                "learning rate",
                &[epochs_series("lr", rows, |r| Some(r.lr))],
            )?,
        ),
        (
            "factor_sums.svg",
            svg_chart(
                "Cauchy-Schwarz factor sums",
                &[
                    epochs_series("sum of squared weight norms", rows, |r| {
                        r.wci_eval.as_ref().map(|w| w.cs_weight_sum)
                    }),
                    epochs_series("sum of clamped traces", rows, |r| {
                        r.wci_eval.as_ref().map(|w| w.cs_trace_sum)
                    }),
                ],
            )?,
        ),
    ];
    let mut written = Vec::new();
    for (name, svg) in charts {
        let path = out_dir.join(name);
        let mut f = std::fs::File::create(&path)?;
        f.write_all(svg.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
