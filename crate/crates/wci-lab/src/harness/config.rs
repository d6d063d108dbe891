//! Experiment configuration: TOML files with flat keys grouped into
//! sections, CLI overrides, and the RUN_SEED environment hook for CI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::AttackConfig;
use crate::curvature;
use crate::error::{Error, Result};
use crate::harness::dataset::{self, Dataset, SplitTag, SyntheticKind};
use crate::models::{self, LossKind, Model, ModelSpec};
use crate::seeding::mix;
use crate::training::{SchedulerConfig, TrainConfig, WciEvalConfig, WciMode, ZoomWindow};

const DS_TRAIN_STREAM: u64 = 0x4000_0000_0000_0001;
const DS_TEST_STREAM: u64 = 0x4000_0000_0000_0002;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "runs".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "gaussian-blobs", "two-moons", "rings", or "idx".
    pub kind: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default)]
    pub margin: f64,
    #[serde(default)]
    pub train_images: Option<String>,
    #[serde(default)]
    pub train_labels: Option<String>,
    #[serde(default)]
    pub test_images: Option<String>,
    #[serde(default)]
    pub test_labels: Option<String>,
}

fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    1000
}
fn default_dims() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    /// Defaults to the run seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

fn default_loss() -> String {
    "softmax-cross-entropy".into()
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub box_lo: f64,
    #[serde(default = "default_one")]
    pub box_hi: f64,
    #[serde(default)]
    pub random_start: bool,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_step() -> f64 {
    0.025
}
fn default_iters() -> usize {
    10
}
fn default_one() -> f64 {
    1.0
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: default_epsilon(),
            step_size: default_step(),
            iters: default_iters(),
            box_lo: 0.0,
            box_hi: 1.0,
            random_start: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    128
}
fn default_base_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            base_lr: default_base_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoomSection {
    pub start: usize,
    pub end: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default = "default_sched_kind")]
    pub kind: String,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default)]
    pub factors: Vec<f64>,
    #[serde(default)]
    pub period: Option<usize>,
    #[serde(default)]
    pub zoom: Vec<ZoomSection>,
    #[serde(default = "default_warm")]
    pub warm_epochs: usize,
    #[serde(default = "default_post_decay")]
    pub post_decay_lr: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_sched_kind() -> String {
    "piecewise".into()
}
fn default_warm() -> usize {
    30
}
fn default_post_decay() -> f64 {
    0.01
}
fn default_threshold() -> f64 {
    100.0
}
fn default_mode() -> String {
    "rebased".into()
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            kind: default_sched_kind(),
            milestones: vec![30, 45],
            factors: vec![0.1, 0.1],
            period: None,
            zoom: Vec::new(),
            warm_epochs: default_warm(),
            post_decay_lr: default_post_decay(),
            threshold: default_threshold(),
            mode: default_mode(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WciSection {
    #[serde(default = "default_every")]
    pub every: usize,
    #[serde(default)]
    pub start_epoch: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_exact_threshold")]
    pub exact_threshold: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_every() -> usize {
    1
}
fn default_probes() -> usize {
    100
}
fn default_eval_batch() -> usize {
    curvature::DEFAULT_EVAL_BATCH
}
fn default_exact_threshold() -> usize {
    curvature::DEFAULT_EXACT_THRESHOLD
}
fn default_lambda() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for WciSection {
    fn default() -> Self {
        WciSection {
            every: default_every(),
            start_epoch: 0,
            probes: default_probes(),
            batch_size: default_eval_batch(),
            exact_threshold: default_exact_threshold(),
            lambda: default_lambda(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub wci: WciSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Targeted CLI overrides layered on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub scheduler: Option<String>,
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        // The one environment hook: RUN_SEED overrides the file seed.
        if let Ok(s) = std::env::var("RUN_SEED") {
            cfg.run.seed = s
                .parse()
                .map_err(|e| Error::Config(format!("RUN_SEED: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(e) = ov.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = ov.seed {
            self.run.seed = s;
        }
        if let Some(t) = ov.threshold {
            self.scheduler.threshold = t;
        }
        if let Some(k) = &ov.scheduler {
            self.scheduler.kind = k.clone();
        }
        if let Some(d) = &ov.out_dir {
            self.run.out_dir = d.clone();
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    pub fn scheduler_config(&self) -> Result<SchedulerConfig> {
        let s = &self.scheduler;
        Ok(match s.kind.as_str() {
            "piecewise" => SchedulerConfig::Piecewise {
                milestones: s.milestones.clone(),
                factors: s.factors.clone(),
            },
            "cosine" => SchedulerConfig::Cosine {
                period: s.period.unwrap_or(self.train.epochs),
            },
            "cyclic" => SchedulerConfig::Cyclic {
                period: s.period.unwrap_or(self.train.epochs),
            },
            "piecewisezoom" => SchedulerConfig::PiecewiseZoom {
                windows: s
                    .zoom
                    .iter()
                    .map(|z| ZoomWindow {
                        start: z.start,
                        end: z.end,
                        factor: z.factor,
                    })
                    .collect(),
            },
            "wci-dynamic" => SchedulerConfig::WciDynamic {
                warm_epochs: s.warm_epochs,
                post_decay_lr: s.post_decay_lr,
                threshold: s.threshold,
                mode: match s.mode.as_str() {
                    "rebased" => WciMode::Rebased,
                    "literal-compound" => WciMode::LiteralCompound,
                    other => {
                        return Err(Error::Config(format!("unknown wci mode `{other}`")))
                    }
                },
            },
            other => return Err(Error::Config(format!("unknown scheduler kind `{other}`"))),
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let loss = LossKind::parse(&self.model.loss)?;
        let seed = self.model.init_seed.unwrap_or(self.run.seed);
        let spec = ModelSpec::new(self.model.widths.clone(), loss, self.model.use_bias, seed);
        spec.validate()?;
        Ok(spec)
    }

    pub fn build_model(&self) -> Result<Model> {
        models::build(&self.model_spec()?)
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack.epsilon,
            step_size: self.attack.step_size,
            iters: self.attack.iters,
            box_lo: self.attack.box_lo,
            box_hi: self.attack.box_hi,
            random_start: self.attack.random_start,
            seed: mix(self.run.seed, 0x5000_0000_0000_0001),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            attack: self.attack_config(),
            scheduler: self.scheduler_config()?,
            seed: self.run.seed,
            wci_eval: WciEvalConfig {
                every: self.wci.every,
                start_epoch: self.effective_wci_start(),
                probes: self.wci.probes,
                batch_size: self.wci.batch_size,
                exact_threshold: self.wci.exact_threshold,
            },
            lambda: self.wci.lambda,
            alpha: self.wci.alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The dynamic scheduler needs a WCI value from the end of the last warm
    /// epoch onward; pull the start earlier if the file asks for later.
    fn effective_wci_start(&self) -> usize {
        if self.scheduler.kind == "wci-dynamic" {
            self.wci
                .start_epoch
                .min(self.scheduler.warm_epochs.saturating_sub(1))
        } else {
            self.wci.start_epoch
        }
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.kind.as_str() {
            "idx" => {
                let need = |o: &Option<String>, what: &str| -> Result<String> {
                    o.clone().ok_or_else(|| {
                        Error::Config(format!("dataset.{what} required for kind = \"idx\""))
                    })
                };
                let train = dataset::read_idx(
                    Path::new(&need(&self.dataset.train_images, "train_images")?),
                    Path::new(&need(&self.dataset.train_labels, "train_labels")?),
                    SplitTag::Train,
                )?;
                let test = dataset::read_idx(
                    Path::new(&need(&self.dataset.test_images, "test_images")?),
                    Path::new(&need(&self.dataset.test_labels, "test_labels")?),
                    SplitTag::Test,
                )?;
                Ok((train, test))
            }
            kind => {
                let kind = SyntheticKind::parse(kind)?;
                let train = dataset::gen_synthetic(
                    kind,
                    self.dataset.n_train,
                    self.dataset.dims,
                    self.dataset.margin,
                    mix(self.run.seed, DS_TRAIN_STREAM),
                    SplitTag::Train,
                )?;
                let test = dataset::gen_synthetic(
                    kind,
                    self.dataset.n_test,
                    self.dataset.dims,
                    self.dataset.margin,
                    mix(self.run.seed, DS_TEST_STREAM),
                    SplitTag::Test,
                )?;
                Ok((train, test))
            }
        }
    }
}
