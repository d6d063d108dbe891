//! Command-line front end: train / attack / wci / bound / correlate / sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wci_lab::adversarial;
use wci_lab::curvature::{self, CurvaturePolicy};
use wci_lab::error::{Error, Result};
use wci_lab::harness::config::{ExperimentConfig, Overrides};
use wci_lab::harness::metrics;
use wci_lab::harness::runner;
use wci_lab::harness::stats;
use wci_lab::models::Model;
use wci_lab::pacbayes;
use wci_lab::training;

#[derive(Parser)]
#[command(
    name = "wci-lab",
    about = "Adversarial training with weight-curvature diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// WCI threshold override for the dynamic scheduler.
    #[arg(long)]
    threshold: Option<f64>,
    /// Scheduler kind override (piecewise, cosine, cyclic, piecewisezoom,
    /// wci-dynamic).
    #[arg(long)]
    scheduler: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run adversarial training and write the run directory.
    Train(Common),
    /// Evaluate clean and adversarial risk of a model on the test split.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute the curvature report and weight-curvature index.
    Wci {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the bound terms, including a λ grid at optimal variances.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Correlate WCI with the robust gaps over a metrics CSV.
    Correlate {
        #[command(flatten)]
        common: Common,
        /// Metrics CSV; defaults to the config's run directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One wci-dynamic run per threshold in the config's sweep section.
    Sweep(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply_overrides(&Overrides {
        epochs: common.epochs,
        seed: common.seed,
        threshold: common.threshold,
        scheduler: common.scheduler.clone(),
        out_dir: common.out.clone(),
    });
    Ok(cfg)
}

fn model_for(cfg: &ExperimentConfig, checkpoint: &Option<PathBuf>) -> Result<Model> {
    let model = cfg.build_model()?;
    match checkpoint {
        None => Ok(model),
        Some(path) => {
            let state = training::load_checkpoint(path, &model.spec)?;
            model.with_params(state.params)
        }
    }
}

/// Frozen adversarial evaluation batch per the config's wci section.
fn frozen_eval_batch(
    cfg: &ExperimentConfig,
    model: &Model,
) -> Result<(wci_lab::models::Batch, usize)> {
    let (train, _) = cfg.datasets()?;
    let n = train.len();
    let size = cfg.wci.batch_size.min(n);
    let batch = train.batch(0..size)?;
    let attack = cfg.attack_config();
    let adv = if attack.epsilon > 0.0 {
        let pert = adversarial::pgd(model, &batch, &attack)?;
        batch.with_inputs(pert.apply(&batch.inputs))?
    } else {
        batch
    };
    Ok((adv, n))
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let artifacts = runner::run_experiment(&cfg)?;
    let s = &artifacts.summary;
    println!("run directory: {}", artifacts.dir.display());
    println!(
        "robust accuracy: final {:.4}, best {:.4} (epoch {}), diff {:.4}",
        s.accuracy.final_robust_acc,
        s.accuracy.best_robust_acc,
        s.accuracy.best_epoch,
        s.accuracy.diff
    );
    if let Some(c) = &s.wci_vs_loss_gap {
        println!(
            "wci vs loss gap over {} epochs: pearson {}, spearman {}",
            c.points,
            c.pearson.map_or("undefined".into(), |v| format!("{v:.4}")),
            c.spearman.map_or("undefined".into(), |v| format!("{v:.4}")),
        );
    }
    if let Some(f) = &s.failure {
        println!("stage failure: {f}");
    }
    Ok(())
}

fn cmd_attack(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let model = model_for(&cfg, checkpoint)?;
    let (_, test) = cfg.datasets()?;
    let attack = cfg.attack_config();
    let clean = adversarial::adversarial_risk(&model, &test, &attack.with_epsilon(0.0))?;
    let robust = adversarial::adversarial_risk(&model, &test, &attack)?;
    println!(
        "clean:  loss {:.6}, error rate {:.4}",
        clean.loss, clean.error_rate
    );
    println!(
        "robust: loss {:.6}, error rate {:.4} (epsilon {}, {} PGD iters)",
        robust.loss, robust.error_rate, attack.epsilon, attack.iters
    );
    Ok(())
}

fn cmd_wci(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let model = model_for(&cfg, checkpoint)?;
    let (batch, _) = frozen_eval_batch(&cfg, &model)?;
    let policy = CurvaturePolicy {
        exact_threshold: cfg.wci.exact_threshold,
        probes: cfg.wci.probes,
        seed: cfg.run.seed,
    };
    let report = curvature::curvature_report(&model, &batch, &policy)?;
    let w = pacbayes::wci(&model, &report)?;
    for (l, term) in report.layers.iter().zip(&w.per_layer_terms) {
        println!(
            "layer {}: trace {:.6e} (clamped {:.6e}, {} {} probes, stderr {:.2e}), term {:.6e}",
            l.layer,
            l.trace_raw,
            l.trace_clamped,
            l.estimator.as_str(),
            l.probes,
            l.stderr,
            term
        );
    }
    println!("wci: {:.6e}", w.wci);
    println!(
        "cauchy-schwarz bound: {:.6e} (weight sum {:.6e}, trace sum {:.6e})",
        w.cs_bound, w.cs_weight_sum, w.cs_trace_sum
    );
    Ok(())
}

fn cmd_bound(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let model = model_for(&cfg, checkpoint)?;
    let (batch, train_n) = frozen_eval_batch(&cfg, &model)?;
    let policy = CurvaturePolicy {
        exact_threshold: cfg.wci.exact_threshold,
        probes: cfg.wci.probes,
        seed: cfg.run.seed,
    };
    let report = curvature::curvature_report(&model, &batch, &policy)?;
    let c = pacbayes::empirical_loss_bound(&model, &batch)?.max(1e-12);
    println!("empirical C (max per-example loss on the eval batch): {c:.6e}");
    let sweep = pacbayes::lambda_sweep(
        &model,
        &report,
        cfg.wci.alpha,
        c,
        train_n,
        cfg.wci.lambda / 100.0,
        cfg.wci.lambda * 100.0,
        9,
    )?;
    println!("lambda        kl+var        sqrt(2/l)*wci   catoni        combined");
    for r in &sweep {
        println!(
            "{:<13.4e} {:<13.6e} {:<15.6e} {:<13.6e} {:<13.6e}",
            r.lambda, r.bound_sum, r.wci_term, r.catoni_const, r.combined_bound
        );
    }
    let best = sweep
        .iter()
        .min_by(|a, b| a.combined_bound.total_cmp(&b.combined_bound))
        .expect("non-empty sweep");
    println!(
        "tightest combined bound {:.6e} at lambda {:.4e}",
        best.combined_bound, best.lambda
    );
    Ok(())
}

fn cmd_correlate(common: &Common, csv: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let path = csv
        .clone()
        .unwrap_or_else(|| runner::run_dir(&cfg).join("metrics.csv"));
    let text = std::fs::read_to_string(&path)?;
    let rows = metrics::parse_metrics_csv(&text)?;
    let wci_pairs: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            r.wci_eval
                .as_ref()
                .map(|w| (w.wci, r.loss_gap, r.err_gap))
        })
        .collect();
    if wci_pairs.len() < 3 {
        return Err(Error::Domain(format!(
            "only {} epochs carry a WCI value in {}",
            wci_pairs.len(),
            path.display()
        )));
    }
    let wci: Vec<f64> = wci_pairs.iter().map(|p| p.0).collect();
    let loss_gap: Vec<f64> = wci_pairs.iter().map(|p| p.1).collect();
    let err_gap: Vec<f64> = wci_pairs.iter().map(|p| p.2).collect();
    let show = |name: &str, c: stats::Correlations| {
        println!(
            "{name}: pearson {}, spearman {}",
            c.pearson.map_or("undefined".into(), |v| format!("{v:.4}")),
            c.spearman.map_or("undefined".into(), |v| format!("{v:.4}")),
        );
    };
    show("wci vs loss gap", stats::correlate(&wci, &loss_gap)?);
    show("wci vs err gap", stats::correlate(&wci, &err_gap)?);
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let root = PathBuf::from(&cfg.run.out_dir).join(format!(
        "{}-sweep-seed{}",
        cfg.run.name, cfg.run.seed
    ));
    let summary = runner::run_threshold_sweep(&cfg, &root)?;
    println!("sweep root: {}", root.display());
    println!("threshold   final     best      diff");
    for (t, run) in summary.thresholds.iter().zip(&summary.runs) {
        println!(
            "{:<11} {:.4}    {:.4}    {:.4}",
            t, run.accuracy.final_robust_acc, run.accuracy.best_robust_acc, run.accuracy.diff
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Attack { common, checkpoint } => cmd_attack(common, checkpoint),
        Command::Wci { common, checkpoint } => cmd_wci(common, checkpoint),
        Command::Bound { common, checkpoint } => cmd_bound(common, checkpoint),
        Command::Correlate { common, csv } => cmd_correlate(common, csv),
        Command::Sweep(c) => cmd_sweep(c),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
