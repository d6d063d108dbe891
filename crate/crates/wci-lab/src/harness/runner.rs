//! Experiment orchestration: one run directory per training run holding the
//! resolved config snapshot, metrics CSV, plots, best/final checkpoints and
//! a JSON summary; threshold sweeps fan out into sub-runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{self, MetricsRow};
use crate::harness::plots;
use crate::harness::stats;
use crate::training::{self, TrainOutcome};

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationSummary {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracySummary {
    pub final_robust_acc: f64,
    pub best_robust_acc: f64,
    pub best_epoch: usize,
    /// best − final, the robust-overfitting fingerprint.
    pub diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub scheduler: String,
    pub epochs_completed: usize,
    pub accuracy: AccuracySummary,
    /// WCI against the robust loss gap over epochs with a WCI value.
    pub wci_vs_loss_gap: Option<CorrelationSummary>,
    pub wci_vs_err_gap: Option<CorrelationSummary>,
    pub wallclock_seconds: f64,
    /// Stage name and message when a stage failed; artifacts up to that
    /// point are preserved.
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
}

fn correlation_of(
    rows: &[MetricsRow],
    pick: impl Fn(&MetricsRow) -> Option<(f64, f64)>,
) -> Option<CorrelationSummary> {
    let pairs: Vec<(f64, f64)> = rows.iter().filter_map(pick).collect();
    if pairs.len() < 3 {
        return None;
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let c = stats::correlate(&a, &b).ok()?;
    Some(CorrelationSummary {
        pearson: c.pearson,
        spearman: c.spearman,
        points: pairs.len(),
    })
}

/// Train per the config and persist every artifact into `dir`.
pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir)?;
    let started = std::time::Instant::now();

    // Config snapshot first, so a failed run still records what was asked.
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;

    let spec = cfg.model_spec()?;
    let model = cfg.build_model()?;
    let (train, test) = cfg.datasets()?;
    let train_cfg = cfg.train_config()?;

    let outcome = training::adv_train(&model, &train, &test, &train_cfg)?;

    if !outcome.metrics.is_empty() {
        metrics::emit_metrics_csv(&outcome.metrics, &dir.join("metrics.csv"))?;
        metrics::emit_timings_csv(&outcome.timings, &dir.join("timings.csv"))?;
        plots::emit_plots(&outcome.metrics, &dir.join("plots"))?;
    }
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    training::save_checkpoint(&outcome.best_state, &spec, &ckpt_dir.join("best.ckpt"))?;
    training::save_checkpoint(&outcome.final_state, &spec, &ckpt_dir.join("final.ckpt"))?;

    let final_acc = outcome
        .metrics
        .last()
        .map(|r| 1.0 - r.test_robust_err)
        .unwrap_or(0.0);
    let summary = RunSummary {
        name: cfg.run.name.clone(),
        seed: cfg.run.seed,
        scheduler: cfg.scheduler.kind.clone(),
        epochs_completed: outcome.metrics.len(),
        accuracy: AccuracySummary {
            final_robust_acc: final_acc,
            best_robust_acc: outcome.best_test_robust_acc,
            best_epoch: outcome.best_epoch,
            diff: outcome.best_test_robust_acc - final_acc,
        },
        wci_vs_loss_gap: correlation_of(&outcome.metrics, |r| {
            r.wci_eval.as_ref().map(|w| (w.wci, r.loss_gap))
        }),
        wci_vs_err_gap: correlation_of(&outcome.metrics, |r| {
            r.wci_eval.as_ref().map(|w| (w.wci, r.err_gap))
        }),
        wallclock_seconds: started.elapsed().as_secs_f64(),
        failure: outcome
            .abort
            .as_ref()
            .map(|a| format!("training epoch {}: {}", a.epoch, a.message)),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary encode: {e}")))?;
    std::fs::write(dir.join("summary.json"), json)?;

    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        summary,
        outcome,
    })
}

/// Default run directory: `<out_dir>/<name>-seed<seed>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.run.out_dir).join(format!("{}-seed{}", cfg.run.name, cfg.run.seed))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    run_experiment_in(cfg, &run_dir(cfg))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub thresholds: Vec<f64>,
    pub runs: Vec<RunSummary>,
}

/// One wci-dynamic run per threshold, in sibling sub-directories.
pub fn run_threshold_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<SweepSummary> {
    if cfg.sweep.thresholds.is_empty() {
        return Err(Error::Config(
            "sweep requires [sweep] thresholds in the config".into(),
        ));
    }
    std::fs::create_dir_all(root)?;
    let mut runs = Vec::new();
    for &threshold in &cfg.sweep.thresholds {
        let mut sub = cfg.clone();
        sub.scheduler.kind = "wci-dynamic".into();
        sub.scheduler.threshold = threshold;
        sub.run.name = format!("{}-thr{:03}", cfg.run.name, threshold as i64);
        let dir = root.join(format!("threshold-{:03}", threshold as i64));
        let artifacts = run_experiment_in(&sub, &dir)?;
        runs.push(artifacts.summary);
    }
    let summary = SweepSummary {
        thresholds: cfg.sweep.thresholds.clone(),
        runs,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("sweep summary encode: {e}")))?;
    std::fs::write(root.join("sweep_summary.json"), json)?;
    Ok(summary)
}
