//! Adversarial training at desk scale: SGD with momentum and weight decay,
//! the scheduler family including the WCI-driven dynamic rule, per-epoch
//! metrics, and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{self, AttackConfig};
use crate::autodiff::ParamVector;
use crate::curvature::{self, CurvaturePolicy};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::metrics::{MetricsRow, PhaseTimings, WciEvalRow};
use crate::models::{self, InputMode, Model, ModelSpec};
use crate::pacbayes::{self, BoundConfig};
use crate::seeding::{mix, streams};

// ── Scheduler ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WciMode {
    /// Algorithm read literally: η ← η/WCI compounds across breaches.
    LiteralCompound,
    /// Divide the fixed post-decay rate by the current WCI instead of
    /// compounding; the default.
    Rebased,
}

/// Geometric ramp from the previous level to `factor` times it over
/// epochs `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoomWindow {
    pub start: usize,
    pub end: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchedulerConfig {
    /// Multiply by `factors[i]` from epoch `milestones[i]` onward.
    Piecewise {
        milestones: Vec<usize>,
        factors: Vec<f64>,
    },
    /// η₀·½(1 + cos(π·min(epoch, period)/period)).
    Cosine { period: usize },
    /// Triangular wave over `period` epochs, peaking at η₀ mid-cycle,
    /// evaluated at epoch + ½ so the rate stays positive.
    Cyclic { period: usize },
    PiecewiseZoom { windows: Vec<ZoomWindow> },
    /// η₀ through the warm epochs, `post_decay_lr` after, divided by the
    /// current WCI whenever it exceeds `threshold`. Never increases after
    /// the warm phase.
    WciDynamic {
        warm_epochs: usize,
        post_decay_lr: f64,
        threshold: f64,
        mode: WciMode,
    },
}

impl SchedulerConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            SchedulerConfig::Piecewise { .. } => "piecewise",
            SchedulerConfig::Cosine { .. } => "cosine",
            SchedulerConfig::Cyclic { .. } => "cyclic",
            SchedulerConfig::PiecewiseZoom { .. } => "piecewisezoom",
            SchedulerConfig::WciDynamic { .. } => "wci-dynamic",
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        match self {
            SchedulerConfig::Piecewise {
                milestones,
                factors,
            } => {
                if milestones.len() != factors.len() {
                    return Err(Error::Config(format!(
                        "{} milestones but {} factors",
                        milestones.len(),
                        factors.len()
                    )));
                }
                if !milestones.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Config("milestones must be strictly ascending".into()));
                }
                if let Some(&f) = factors.iter().find(|&&f| !(f > 0.0)) {
                    return Err(Error::Config(format!("factor must be > 0, got {f}")));
                }
            }
            SchedulerConfig::Cosine { period } => {
                if *period == 0 {
                    return Err(Error::Config("cosine period must be ≥ 1".into()));
                }
                if epochs > 0 && *period < epochs {
                    return Err(Error::Config(format!(
                        "cosine period {period} shorter than the {epochs}-epoch run \
                         would drive the rate to zero"
                    )));
                }
            }
            SchedulerConfig::Cyclic { period } => {
                if *period == 0 {
                    return Err(Error::Config("cyclic period must be ≥ 1".into()));
                }
            }
            SchedulerConfig::PiecewiseZoom { windows } => {
                for w in windows {
                    if w.end <= w.start {
                        return Err(Error::Config(format!(
                            "zoom window [{}, {}) is empty",
                            w.start, w.end
                        )));
                    }
                    if !(w.factor > 0.0) {
                        return Err(Error::Config(format!(
                            "zoom factor must be > 0, got {}",
                            w.factor
                        )));
                    }
                }
                if !windows.windows(2).all(|p| p[0].end <= p[1].start) {
                    return Err(Error::Config("zoom windows must not overlap".into()));
                }
            }
            SchedulerConfig::WciDynamic {
                warm_epochs,
                post_decay_lr,
                threshold,
                ..
            } => {
                if !(*threshold > 0.0) {
                    return Err(Error::Config(format!(
                        "wci threshold must be > 0, got {threshold}"
                    )));
                }
                if !(*post_decay_lr > 0.0) {
                    return Err(Error::Config(format!(
                        "post-decay rate must be > 0, got {post_decay_lr}"
                    )));
                }
                if epochs > 0 && *warm_epochs >= epochs {
                    return Err(Error::Config(format!(
                        "warm epochs {warm_epochs} must be below the epoch count {epochs}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stateful learning-rate source. `next(epoch, wci)` is the `scheduler_next`
/// operation; the dynamic kind carries the previous rate so breaches can
/// compound and the rate stays monotone after the warm phase.
#[derive(Clone, Debug)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    base_lr: f64,
    current: f64,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, base_lr: f64) -> Self {
        Scheduler {
            cfg,
            base_lr,
            current: base_lr,
        }
    }

    pub fn next(&mut self, epoch: usize, wci: Option<f64>) -> Result<f64> {
        let lr = match &self.cfg {
            SchedulerConfig::WciDynamic { warm_epochs, .. } => {
                if epoch < *warm_epochs && wci.is_some() {
                    return Err(Error::Contract(
                        "wci value supplied before the warm phase ended".into(),
                    ));
                }
                self.next_dynamic(epoch, wci)?
            }
            other => {
                if wci.is_some() {
                    return Err(Error::Contract(format!(
                        "wci value supplied to the {} scheduler",
                        other.kind()
                    )));
                }
                match other {
                    SchedulerConfig::Piecewise {
                        milestones,
                        factors,
                    } => {
                        let mut lr = self.base_lr;
                        for (&m, &f) in milestones.iter().zip(factors) {
                            if epoch >= m {
                                lr *= f;
                            }
                        }
                        lr
                    }
                    SchedulerConfig::Cosine { period } => {
                        let t = epoch.min(*period) as f64 / *period as f64;
                        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                    }
                    SchedulerConfig::Cyclic { period } => {
                        let pos = ((epoch % period) as f64 + 0.5) / *period as f64;
                        self.base_lr * (1.0 - (2.0 * pos - 1.0).abs())
                    }
                    SchedulerConfig::PiecewiseZoom { windows } => {
                        let mut level = self.base_lr;
                        let mut lr = self.base_lr;
                        for w in windows {
                            if epoch >= w.end {
                                level *= w.factor;
                                lr = level;
                            } else if epoch >= w.start {
                                let frac =
                                    (epoch - w.start + 1) as f64 / (w.end - w.start) as f64;
                                lr = level * w.factor.powf(frac);
                            }
                        }
                        lr
                    }
                    SchedulerConfig::WciDynamic { .. } => unreachable!(),
                }
            }
        };
        self.current = lr;
        Ok(lr)
    }

    fn next_dynamic(&mut self, epoch: usize, wci: Option<f64>) -> Result<f64> {
        let SchedulerConfig::WciDynamic {
            warm_epochs,
            post_decay_lr,
            threshold,
            mode,
        } = &self.cfg
        else {
            unreachable!()
        };
        if epoch < *warm_epochs {
            return Ok(self.base_lr);
        }
        let wci = wci.ok_or_else(|| {
            Error::Contract("wci-dynamic scheduler needs a wci value after the warm phase".into())
        })?;
        let breached = wci > *threshold;
        let prev = if epoch == *warm_epochs {
            // First post-decay epoch starts from the decayed rate.
            *post_decay_lr
        } else {
            self.current
        };
        Ok(match mode {
            WciMode::LiteralCompound => {
                if breached {
                    prev / wci
                } else {
                    prev
                }
            }
            WciMode::Rebased => {
                let target = if breached {
                    *post_decay_lr / wci
                } else {
                    *post_decay_lr
                };
                // Monotone after the warm phase.
                target.min(prev)
            }
        })
    }
}

// ── SGD ──────────────────────────────────────────────────────────────

/// One SGD step with decoupled-into-gradient weight decay:
/// g' = g + wd·w, v ← m·v + g', w ← w − η·v. The state is untouched when
/// the gradient is non-finite.
pub fn sgd_step(
    state: &mut TrainState,
    grads: &ParamVector,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !state.params.same_layout(grads) {
        return Err(Error::Layout(
            "gradient layout does not match parameters".into(),
        ));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric {
            site: "node",
            index: 0,
            message: "non-finite gradient in sgd step".into(),
        });
    }
    let lr = state.lr;
    let w = state.params.flat_mut();
    let g = grads.flat();
    let v = state.momentum.flat_mut();
    for i in 0..w.len() {
        let g_decayed = g[i] + weight_decay * w[i];
        v[i] = momentum * v[i] + g_decayed;
        w[i] -= lr * v[i];
    }
    Ok(())
}

// ── Train configuration and state ────────────────────────────────────

/// Cadence and cost knobs for the per-epoch curvature/WCI evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct WciEvalConfig {
    /// Evaluate when `epoch ≥ start_epoch` and `(epoch − start_epoch) % every == 0`.
    pub every: usize,
    pub start_epoch: usize,
    pub probes: usize,
    pub batch_size: usize,
    pub exact_threshold: usize,
}

impl Default for WciEvalConfig {
    fn default() -> Self {
        WciEvalConfig {
            every: 1,
            start_epoch: 0,
            probes: 100,
            batch_size: curvature::DEFAULT_EVAL_BATCH,
            exact_threshold: curvature::DEFAULT_EXACT_THRESHOLD,
        }
    }
}

impl WciEvalConfig {
    pub fn due(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch && (epoch - self.start_epoch) % self.every == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub wci_eval: WciEvalConfig,
    /// PAC-Bayes report inputs; |S| is the training-set size and C the
    /// empirical max loss on the evaluation batch.
    pub lambda: f64,
    pub alpha: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base learning rate must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        self.attack.validate()?;
        self.scheduler.validate(self.epochs)?;
        if self.wci_eval.every == 0 {
            return Err(Error::Config("wci cadence must be ≥ 1".into()));
        }
        if self.wci_eval.batch_size == 0 {
            return Err(Error::Config("wci eval batch size must be ≥ 1".into()));
        }
        if let SchedulerConfig::WciDynamic { warm_epochs, .. } = &self.scheduler {
            // The dynamic rule consumes a WCI value at every epoch past the
            // warm phase, so the evaluation cadence must produce one at the
            // end of every epoch from warm−1 on.
            if *warm_epochs == 0
                || self.wci_eval.start_epoch > warm_epochs - 1
                || self.wci_eval.every != 1
            {
                return Err(Error::Config(
                    "wci-dynamic needs wci evaluation every epoch from warm_epochs−1 on".into(),
                ));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("λ must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "α must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Optimizer state between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ParamVector,
    pub momentum: ParamVector,
    pub lr: f64,
    /// Master seed; all per-epoch streams derive from it.
    pub rng_seed: u64,
    pub last_wci: Option<f64>,
}

impl TrainState {
    pub fn fresh(model: &Model, base_lr: f64, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            params: model.params.clone(),
            momentum: ParamVector::zeros(model.params.layout().clone()),
            lr: base_lr,
            rng_seed: seed,
            last_wci: None,
        }
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"WCI1";
const CHECKPOINT_VERSION: u16 = 1;

/// Little-endian binary checkpoint: magic "WCI1", version u16, spec hash
/// u64, epoch u64, lr f64, rng seed u64, last-wci flag byte + f64, length
/// u64, then the layout-ordered parameter and momentum arrays.
pub fn save_checkpoint(state: &TrainState, spec: &ModelSpec, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 16 * state.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&spec.hash().to_le_bytes());
    buf.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    buf.extend_from_slice(&state.lr.to_le_bytes());
    buf.extend_from_slice(&state.rng_seed.to_le_bytes());
    buf.push(state.last_wci.is_some() as u8);
    buf.extend_from_slice(&state.last_wci.unwrap_or(0.0).to_le_bytes());
    buf.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for &v in state.params.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in state.momentum.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *at + n > bytes.len() {
        return Err(Error::CheckpointLoad(format!(
            "truncated checkpoint: needed {n} bytes at offset {at}, file has {}",
            bytes.len()
        )));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

fn take_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, at, 8)?.try_into().unwrap()))
}

fn take_f64(bytes: &[u8], at: &mut usize) -> Result<f64> {
    Ok(f64::from_le_bytes(take(bytes, at, 8)?.try_into().unwrap()))
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    if take(&bytes, &mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointLoad("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(&bytes, &mut at, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointLoad(format!(
            "unsupported version {version}"
        )));
    }
    let hash = take_u64(&bytes, &mut at)?;
    if hash != spec.hash() {
        return Err(Error::CheckpointLoad(
            "spec hash mismatch: checkpoint belongs to a different model spec".into(),
        ));
    }
    let epoch = take_u64(&bytes, &mut at)? as usize;
    let lr = take_f64(&bytes, &mut at)?;
    let rng_seed = take_u64(&bytes, &mut at)?;
    let has_wci = take(&bytes, &mut at, 1)?[0] != 0;
    let wci_value = take_f64(&bytes, &mut at)?;
    let len = take_u64(&bytes, &mut at)? as usize;
    let layout = spec.layout()?;
    if len != layout.len() {
        return Err(Error::CheckpointLoad(format!(
            "parameter count {len} does not match the spec layout ({})",
            layout.len()
        )));
    }
    let mut params = vec![0.0; len];
    for p in params.iter_mut() {
        *p = take_f64(&bytes, &mut at)?;
    }
    let mut momentum = vec![0.0; len];
    for m in momentum.iter_mut() {
        *m = take_f64(&bytes, &mut at)?;
    }
    if at != bytes.len() {
        return Err(Error::CheckpointLoad(format!(
            "{} trailing bytes after payload",
            bytes.len() - at
        )));
    }
    Ok(TrainState {
        epoch,
        params: ParamVector::from_flat(layout.clone(), params)?,
        momentum: ParamVector::from_flat(layout, momentum)?,
        lr,
        rng_seed,
        last_wci: has_wci.then_some(wci_value),
    })
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AbortInfo {
    pub epoch: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub timings: Vec<PhaseTimings>,
    pub final_state: TrainState,
    pub best_state: TrainState,
    pub best_epoch: usize,
    pub best_test_robust_acc: f64,
    pub abort: Option<AbortInfo>,
}

/// Seeded subsample of dataset indices, fixed across epochs so trace curves
/// stay comparable.
fn eval_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let size = size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, streams::EVAL_BATCH));
    let mut idx: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first `size` entries become the sample.
    for i in 0..size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(size);
    idx
}

fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, streams::SHUFFLE + epoch as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// End-of-epoch curvature/WCI/bound evaluation on the frozen eval batch.
fn wci_evaluation(
    model: &Model,
    train: &Dataset,
    eval_idx: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<WciEvalRow> {
    let clean = train.batch_by_indices(eval_idx)?;
    let adv_inputs = if cfg.attack.epsilon > 0.0 {
        let streams_keys: Vec<u64> = eval_idx.iter().map(|&i| i as u64).collect();
        let pert = adversarial::pgd_with_streams(model, &clean, &cfg.attack, &streams_keys)?;
        pert.apply(&clean.inputs)
    } else {
        clean.inputs.clone()
    };
    let frozen = clean.with_inputs(adv_inputs)?;
    let policy = CurvaturePolicy {
        exact_threshold: cfg.wci_eval.exact_threshold,
        probes: cfg.wci_eval.probes,
        seed: mix(cfg.seed, streams::CURVATURE + epoch as u64),
    };
    let curv = curvature::curvature_report(model, &frozen, &policy)?;
    let sigmas = pacbayes::optimal_sigmas(model, &curv, cfg.lambda)?;
    let empirical_c = pacbayes::empirical_loss_bound(model, &frozen)?.max(1e-12);
    let bound_cfg = BoundConfig {
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        loss_bound_c: empirical_c,
        sample_count: train.len(),
    };
    let bound = pacbayes::bound_report(model, &curv, &bound_cfg, &sigmas.spec)?;
    Ok(WciEvalRow {
        trace_raw: curv.layers.iter().map(|l| l.trace_raw).collect(),
        trace_clamped: curv.layers.iter().map(|l| l.trace_clamped).collect(),
        trace_stderr: curv.layers.iter().map(|l| l.stderr).collect(),
        wci: bound.wci.wci,
        cs_weight_sum: bound.wci.cs_weight_sum,
        cs_trace_sum: bound.wci.cs_trace_sum,
        cs_bound: bound.wci.cs_bound,
        kl_term: bound.kl_term,
        variability_bound: bound.variability_bound,
        combined_bound: bound.combined_bound,
        catoni_const: bound.catoni_const,
        clamp_count: bound.wci.clamp_count,
    })
}

/// The adversarial training protocol: per batch, regenerate PGD examples at
/// the current parameters and step SGD on them; per epoch, evaluate robust
/// risk on both splits and (on cadence) the curvature/WCI/bound block.
/// Deterministic for a fixed config and seed.
pub fn adv_train(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() == 0 || test.len() == 0 {
        return Err(Error::Domain("training needs non-empty splits".into()));
    }
    let mut state = TrainState::fresh(model, cfg.base_lr, cfg.seed);
    let mut scheduler = Scheduler::new(cfg.scheduler.clone(), cfg.base_lr);
    let eval_idx = eval_indices(train.len(), cfg.wci_eval.batch_size, cfg.seed);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut timings = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_state = state.clone();
    let mut abort = None;

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let snapshot = state.clone();

        let sched_wci = match &cfg.scheduler {
            SchedulerConfig::WciDynamic { warm_epochs, .. } if epoch >= *warm_epochs => {
                state.last_wci
            }
            _ => None,
        };
        let lr = match scheduler.next(epoch, sched_wci) {
            Ok(lr) => lr,
            Err(e) => {
                abort = Some(AbortInfo {
                    epoch,
                    message: e.to_string(),
                });
                state = snapshot;
                break 'epochs;
            }
        };
        state.lr = lr;
        state.epoch = epoch;

        // ── Optimizer sweep ──
        let t_train = Instant::now();
        let perm = epoch_permutation(train.len(), cfg.seed, epoch);
        for chunk in perm.chunks(cfg.batch_size) {
            let step = (|| -> Result<()> {
                let current = model.with_params(state.params.clone())?;
                let batch = train.batch_by_indices(chunk)?;
                let adv_batch = if cfg.attack.epsilon > 0.0 {
                    let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                    let pert =
                        adversarial::pgd_with_streams(&current, &batch, &cfg.attack, &keys)?;
                    batch.with_inputs(pert.apply(&batch.inputs))?
                } else {
                    batch
                };
                let mut lt = models::loss_tape(&current, &adv_batch, InputMode::Fixed)?;
                let grads = lt.gradient()?;
                sgd_step(&mut state, &grads, cfg.momentum, cfg.weight_decay)
            })();
            if let Err(e) = step {
                abort = Some(AbortInfo {
                    epoch,
                    message: e.to_string(),
                });
                state = snapshot;
                break 'epochs;
            }
        }
        let train_seconds = t_train.elapsed().as_secs_f64();

        // ── Robust risk on both splits ──
        let t_risk = Instant::now();
        let current = model.with_params(state.params.clone())?;
        let gap = match adversarial::robust_gap(&current, train, test, &cfg.attack) {
            Ok(g) => g,
            Err(e) => {
                abort = Some(AbortInfo {
                    epoch,
                    message: e.to_string(),
                });
                state = snapshot;
                break 'epochs;
            }
        };
        let risk_seconds = t_risk.elapsed().as_secs_f64();

        // ── Curvature / WCI / bound on cadence ──
        let t_curv = Instant::now();
        let wci_eval = if cfg.wci_eval.due(epoch) {
            match wci_evaluation(&current, train, &eval_idx, cfg, epoch) {
                Ok(row) => {
                    state.last_wci = Some(row.wci);
                    Some(row)
                }
                Err(e) => {
                    abort = Some(AbortInfo {
                        epoch,
                        message: e.to_string(),
                    });
                    state = snapshot;
                    break 'epochs;
                }
            }
        } else {
            None
        };
        let curvature_seconds = t_curv.elapsed().as_secs_f64();

        metrics.push(MetricsRow {
            epoch,
            lr,
            train_robust_loss: gap.train.loss,
            train_robust_err: gap.train.error_rate,
            test_robust_loss: gap.test.loss,
            test_robust_err: gap.test.error_rate,
            loss_gap: gap.loss_gap,
            err_gap: gap.error_gap,
            layer_fro_sq: models::frobenius_sq_all(&current),
            wci_eval,
        });
        timings.push(PhaseTimings {
            epoch,
            train_seconds,
            risk_seconds,
            curvature_seconds,
            total_seconds: epoch_start.elapsed().as_secs_f64(),
        });

        let acc = 1.0 - gap.test.error_rate;
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best_state = state.clone();
        }
    }

    Ok(TrainOutcome {
        metrics,
        timings,
        final_state: state,
        best_state,
        best_epoch,
        best_test_robust_acc: best_acc.max(0.0),
        abort,
    })
}
