//! Worst-case ℓ∞ perturbation search and empirical adversarial risk.
//!
//! Attacks maximize the model's own training loss. The sign convention is
//! sign(0) = 0, so flat coordinates are never perturbed, and every returned
//! perturbation satisfies both ‖δ‖∞ ≤ ε and box containment exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::models::{self, Batch, InputMode, Model};

/// ℓ∞ attack configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Perturbation budget in input units.
    pub epsilon: f64,
    /// Per-iteration step in input units.
    pub step_size: f64,
    pub iters: usize,
    pub box_lo: f64,
    pub box_hi: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Desk-scale defaults for synthetic data on the unit box.
    pub fn desk_default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            step_size: 0.025,
            iters: 10,
            box_lo: 0.0,
            box_hi: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    /// Image-scale preset (8/255 budget, 2/255 steps) for IDX corpora.
    pub fn image_preset() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iters: 10,
            box_lo: 0.0,
            box_hi: 1.0,
            random_start: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be ≥ 0, got {}",
                self.epsilon
            )));
        }
        if self.iters > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step size must be > 0 when iterating, got {}",
                self.step_size
            )));
        }
        if !(self.box_lo < self.box_hi) {
            return Err(Error::Config(format!(
                "input box [{}, {}] is empty",
                self.box_lo, self.box_hi
            )));
        }
        Ok(())
    }

    /// Copy with a different epsilon (clean evaluation uses ε = 0).
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..self.clone()
        }
    }
}

/// Per-example input perturbation; shares the batch's shape.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta: Mat,
}

impl Perturbation {
    pub fn apply(&self, inputs: &Mat) -> Mat {
        let data = inputs
            .data
            .iter()
            .zip(&self.delta.data)
            .map(|(x, d)| x + d)
            .collect();
        Mat::from_vec(inputs.rows, inputs.cols, data)
    }
}

#[inline]
fn sign_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project `x + delta` onto the ε-ball around `x` intersected with the box.
fn project(x: &Mat, x_adv: &mut Mat, cfg: &AttackConfig) {
    for (xa, &xi) in x_adv.data.iter_mut().zip(&x.data) {
        let lo = (xi - cfg.epsilon).max(cfg.box_lo);
        let hi = (xi + cfg.epsilon).min(cfg.box_hi);
        *xa = xa.clamp(lo, hi);
    }
}

fn input_gradient(model: &Model, batch: &Batch) -> Result<Mat> {
    let mut lt = models::loss_tape(model, batch, InputMode::Differentiable)?;
    lt.input_gradient()
}

/// Single-step signed-gradient attack: δ = clip(ε·sign(∂ℓ/∂x)).
pub fn fgsm(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let g = input_gradient(model, batch)?;
    let x = &batch.inputs;
    let mut x_adv = x.clone();
    for (xa, &gi) in x_adv.data.iter_mut().zip(&g.data) {
        *xa += cfg.epsilon * sign_zero(gi);
    }
    project(x, &mut x_adv, cfg);
    let delta = Mat::from_vec(
        x.rows,
        x.cols,
        x_adv.data.iter().zip(&x.data).map(|(a, b)| a - b).collect(),
    );
    Ok(Perturbation { delta })
}

/// Projected gradient descent: `iters` signed steps of `step_size`, each
/// projected onto the ε-ball and input box. Returns the final perturbation.
///
/// Per-example random starts draw from a stream derived from `cfg.seed` and
/// `example_offset + row`, so results do not depend on how a dataset was cut
/// into batches.
pub fn pgd_offset(
    model: &Model,
    batch: &Batch,
    cfg: &AttackConfig,
    example_offset: u64,
) -> Result<Perturbation> {
    let streams: Vec<u64> = (0..batch.len() as u64).map(|i| example_offset + i).collect();
    pgd_with_streams(model, batch, cfg, &streams)
}

/// PGD with an explicit per-example random-start stream key (typically the
/// example's dataset index, so shuffled batches stay reproducible).
pub fn pgd_with_streams(
    model: &Model,
    batch: &Batch,
    cfg: &AttackConfig,
    streams: &[u64],
) -> Result<Perturbation> {
    cfg.validate()?;
    if cfg.iters < 1 {
        return Err(Error::Config("pgd requires at least one iteration".into()));
    }
    if streams.len() != batch.len() {
        return Err(Error::Consistency(format!(
            "{} stream keys for {} examples",
            streams.len(),
            batch.len()
        )));
    }
    let x = &batch.inputs;
    let mut x_adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for i in 0..x.rows {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, streams[i]));
            for j in 0..x.cols {
                let d = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                x_adv.data[i * x.cols + j] += d;
            }
        }
        project(x, &mut x_adv, cfg);
    }
    if cfg.epsilon > 0.0 {
        for _ in 0..cfg.iters {
            let adv_batch = batch.with_inputs(x_adv.clone())?;
            let g = input_gradient(model, &adv_batch)?;
            for (xa, &gi) in x_adv.data.iter_mut().zip(&g.data) {
                *xa += cfg.step_size * sign_zero(gi);
            }
            project(x, &mut x_adv, cfg);
        }
    }
    let delta = Mat::from_vec(
        x.rows,
        x.cols,
        x_adv.data.iter().zip(&x.data).map(|(a, b)| a - b).collect(),
    );
    Ok(Perturbation { delta })
}

pub fn pgd(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Perturbation> {
    pgd_offset(model, batch, cfg, 0)
}

use crate::seeding::mix;

/// Mean adversarial loss and misclassification rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskReport {
    pub loss: f64,
    pub error_rate: f64,
}

/// Batch size used when sweeping a dataset through attacks and evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Adversarial risk of the model on a dataset: PGD examples per chunk, then
/// mean loss and error rate over all examples in dataset order.
pub fn adversarial_risk(model: &Model, data: &Dataset, cfg: &AttackConfig) -> Result<RiskReport> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::Domain("adversarial risk over empty dataset".into()));
    }
    let mut loss_total = 0.0;
    let mut errors = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let batch = data.batch(start..end)?;
        let adv_inputs = if cfg.epsilon > 0.0 {
            let pert = pgd_offset(model, &batch, cfg, start as u64)?;
            pert.apply(&batch.inputs)
        } else {
            batch.inputs.clone()
        };
        let adv_batch = batch.with_inputs(adv_inputs)?;
        let lt = models::loss_tape(model, &adv_batch, InputMode::Fixed)?;
        for l in lt.per_example_losses() {
            loss_total += l;
        }
        let preds = models::predict(model, &adv_batch.inputs)?;
        for (i, p) in preds.iter().enumerate() {
            if *p != data.labels[start + i] {
                errors += 1;
            }
        }
        start = end;
    }
    Ok(RiskReport {
        loss: loss_total / n as f64,
        error_rate: errors as f64 / n as f64,
    })
}

/// Adversarial test-minus-train gaps.
#[derive(Clone, Copy, Debug)]
pub struct GapReport {
    pub train: RiskReport,
    pub test: RiskReport,
    pub loss_gap: f64,
    pub error_gap: f64,
}

pub fn robust_gap(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
) -> Result<GapReport> {
    let train_risk = adversarial_risk(model, train, cfg)?;
    let test_risk = adversarial_risk(model, test, cfg)?;
    Ok(GapReport {
        train: train_risk,
        test: test_risk,
        loss_gap: test_risk.loss - train_risk.loss,
        error_gap: test_risk.error_rate - train_risk.error_rate,
    })
}
