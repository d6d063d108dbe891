//! Per-epoch metrics rows and the versioned CSV schema.
//!
//! The metrics CSV is fully deterministic for a fixed config and seed:
//! floats print with 17 significant digits (exact f64 round-trip), WCI
//! columns are empty off-cadence, and wall-clock phase timings go to a
//! separate `timings.csv` so they never break byte-identity.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Bumped whenever a column is added, removed, or renamed.
pub const SCHEMA_VERSION: &str = "wci-metrics-v1";

/// Fields present only on the curvature-evaluation cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct WciEvalRow {
    pub trace_raw: Vec<f64>,
    pub trace_clamped: Vec<f64>,
    pub trace_stderr: Vec<f64>,
    pub wci: f64,
    pub cs_weight_sum: f64,
    pub cs_trace_sum: f64,
    pub cs_bound: f64,
    pub kl_term: f64,
    pub variability_bound: f64,
    pub combined_bound: f64,
    pub catoni_const: f64,
    pub clamp_count: usize,
}

/// One epoch of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_robust_loss: f64,
    pub train_robust_err: f64,
    pub test_robust_loss: f64,
    pub test_robust_err: f64,
    /// test_robust_loss − train_robust_loss, exactly.
    pub loss_gap: f64,
    pub err_gap: f64,
    pub layer_fro_sq: Vec<f64>,
    pub wci_eval: Option<WciEvalRow>,
}

/// Wall-clock seconds per phase; written to `timings.csv`, never to the
/// deterministic metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTimings {
    pub epoch: usize,
    pub train_seconds: f64,
    pub risk_seconds: f64,
    pub curvature_seconds: f64,
    pub total_seconds: f64,
}

/// 17 significant digits: enough to reproduce the exact f64 on parse.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(layers: usize) -> String {
    let mut cols: Vec<String> = vec![
        "epoch".into(),
        "lr".into(),
        "train_robust_loss".into(),
        "train_robust_err".into(),
        "test_robust_loss".into(),
        "test_robust_err".into(),
        "loss_gap".into(),
        "err_gap".into(),
    ];
    for k in 0..layers {
        cols.push(format!("w_fro_sq_{k}"));
    }
    for k in 0..layers {
        cols.push(format!("trace_raw_{k}"));
    }
    for k in 0..layers {
        cols.push(format!("trace_clamped_{k}"));
    }
    for k in 0..layers {
        cols.push(format!("trace_stderr_{k}"));
    }
    cols.extend(
        [
            "wci",
            "cs_weight_sum",
            "cs_trace_sum",
            "cs_bound",
            "kl_term",
            "variability_bound",
            "combined_bound",
            "catoni_const",
            "clamp_count",
        ]
        .map(String::from),
    );
    cols.join(",")
}

/// Render rows to CSV text: a `# schema:` comment line, the header row,
/// then one line per epoch.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Domain("no metrics rows to emit".into()));
    }
    let layers = rows[0].layer_fro_sq.len();
    let mut out = String::new();
    out.push_str(&format!("# schema: {SCHEMA_VERSION}\n"));
    out.push_str(&header(layers));
    out.push('\n');
    for row in rows {
        if row.layer_fro_sq.len() != layers {
            return Err(Error::Consistency(
                "layer count changed between metrics rows".into(),
            ));
        }
        let mut cells: Vec<String> = vec![
            row.epoch.to_string(),
            fmt(row.lr),
            fmt(row.train_robust_loss),
            fmt(row.train_robust_err),
            fmt(row.test_robust_loss),
            fmt(row.test_robust_err),
            fmt(row.loss_gap),
            fmt(row.err_gap),
        ];
        for &v in &row.layer_fro_sq {
            cells.push(fmt(v));
        }
        match &row.wci_eval {
            Some(w) => {
                if w.trace_raw.len() != layers {
                    return Err(Error::Consistency(
                        "trace layer count does not match weight layer count".into(),
                    ));
                }
                for &v in &w.trace_raw {
                    cells.push(fmt(v));
                }
                for &v in &w.trace_clamped {
                    cells.push(fmt(v));
                }
                for &v in &w.trace_stderr {
                    cells.push(fmt(v));
                }
                cells.push(fmt(w.wci));
                cells.push(fmt(w.cs_weight_sum));
                cells.push(fmt(w.cs_trace_sum));
                cells.push(fmt(w.cs_bound));
                cells.push(fmt(w.kl_term));
                cells.push(fmt(w.variability_bound));
                cells.push(fmt(w.combined_bound));
                cells.push(fmt(w.catoni_const));
                cells.push(w.clamp_count.to_string());
            }
            None => {
                for _ in 0..(3 * layers + 9) {
                    cells.push(String::new());
                }
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let text = metrics_csv(rows)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn emit_timings_csv(timings: &[PhaseTimings], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_seconds,risk_seconds,curvature_seconds,total_seconds\n");
    for t in timings {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            t.epoch, t.train_seconds, t.risk_seconds, t.curvature_seconds, t.total_seconds
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse CSV text produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("metrics csv has no header".into()))?;
    let columns: Vec<&str> = header_line.split(',').collect();
    let layers = columns
        .iter()
        .filter(|c| c.starts_with("w_fro_sq_"))
        .count();
    if columns.len() != 8 + 4 * layers + 9 {
        return Err(Error::Format(format!(
            "unexpected column count {} for {layers} layers",
            columns.len()
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::Format(format!(
                "line {}: {} cells for {} columns",
                lineno + 2,
                cells.len(),
                columns.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: bad float `{s}`: {e}", lineno + 2)))
        };
        let mut at = 0usize;
        let mut next = || {
            let c = cells[at];
            at += 1;
            c
        };
        let epoch: usize = next()
            .parse()
            .map_err(|e| Error::Format(format!("bad epoch: {e}")))?;
        let lr = f(next())?;
        let train_robust_loss = f(next())?;
        let train_robust_err = f(next())?;
        let test_robust_loss = f(next())?;
        let test_robust_err = f(next())?;
        let loss_gap = f(next())?;
        let err_gap = f(next())?;
        let mut layer_fro_sq = Vec::with_capacity(layers);
        for _ in 0..layers {
            layer_fro_sq.push(f(next())?);
        }
        let wci_cells: Vec<&str> = (0..3 * layers + 9).map(|_| next()).collect();
        let wci_eval = if wci_cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            let mut w_at = 0usize;
            let mut wnext = || {
                let c = wci_cells[w_at];
                w_at += 1;
                c
            };
            let mut vec_of = |n: usize| -> Result<Vec<f64>> {
                (0..n).map(|_| f(wnext())).collect()
            };
            let trace_raw = vec_of(layers)?;
            let trace_clamped = vec_of(layers)?;
            let trace_stderr = vec_of(layers)?;
            Some(WciEvalRow {
                trace_raw,
                trace_clamped,
                trace_stderr,
                wci: f(wnext())?,
                cs_weight_sum: f(wnext())?,
                cs_trace_sum: f(wnext())?,
                cs_bound: f(wnext())?,
                kl_term: f(wnext())?,
                variability_bound: f(wnext())?,
                combined_bound: f(wnext())?,
                catoni_const: f(wnext())?,
                clamp_count: wnext()
                    .parse()
                    .map_err(|e| Error::Format(format!("bad clamp count: {e}")))?,
            })
        };
        rows.push(MetricsRow {
            epoch,
            lr,
            train_robust_loss,
            train_robust_err,
            test_robust_loss,
            test_robust_err,
            loss_gap,
            err_gap,
            layer_fro_sq,
            wci_eval,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, with_wci: bool) -> MetricsRow {
        MetricsRow {
            epoch,
            lr: 0.1,
            train_robust_loss: 0.5123456789012345,
            train_robust_err: 0.25,
            test_robust_loss: 1.5,
            test_robust_err: 0.5,
            loss_gap: 1.5 - 0.5123456789012345,
            err_gap: 0.25,
            layer_fro_sq: vec![1.25, 2.5],
            wci_eval: with_wci.then(|| WciEvalRow {
                trace_raw: vec![0.5, -0.125],
                trace_clamped: vec![0.5, 0.0],
                trace_stderr: vec![0.0, 0.01],
                wci: 3.0,
                cs_weight_sum: 3.75,
                cs_trace_sum: 0.5,
                cs_bound: 1.369,
                kl_term: 2.0,
                variability_bound: 1.0,
                combined_bound: 4.3,
                catoni_const: 0.27,
                clamp_count: 1,
            }),
        }
    }

    #[test]
    fn single_row_has_header_and_one_line() {
        let text = metrics_csv(&[row(0, true)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3); // schema comment, header, one row
        assert!(lines[0].contains(SCHEMA_VERSION));
        let header_cols = lines[1].split(',').count();
        let row_cols = lines[2].split(',').count();
        assert_eq!(header_cols, row_cols);
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![row(0, true), row(1, false), row(2, true)];
        let text = metrics_csv(&rows).unwrap();
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn gap_column_recomputable_from_loss_columns() {
        let r = row(0, false);
        let text = metrics_csv(&[r.clone()]).unwrap();
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(
            parsed[0].loss_gap,
            parsed[0].test_robust_loss - parsed[0].train_robust_loss
        );
    }

    #[test]
    fn empty_rows_is_domain_error() {
        assert!(matches!(metrics_csv(&[]), Err(Error::Domain(_))));
    }
}
