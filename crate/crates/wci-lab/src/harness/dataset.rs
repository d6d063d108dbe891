//! Dataset construction: seeded synthetic two-class tasks scaled into the
//! unit box, and IDX ingestion for MNIST-style corpora.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::models::{Batch, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        dims: usize,
        margin: f64,
        seed: u64,
    },
    File {
        images: String,
        labels: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    GaussianBlobs,
    TwoMoons,
    Rings,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(SyntheticKind::GaussianBlobs),
            "two-moons" => Ok(SyntheticKind::TwoMoons),
            "rings" => Ok(SyntheticKind::Rings),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::GaussianBlobs => "gaussian-blobs",
            SyntheticKind::TwoMoons => "two-moons",
            SyntheticKind::Rings => "rings",
        }
    }
}

/// Inputs in [0,1]^d with integer class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitTag,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols
    }

    /// Contiguous slice of examples as a batch.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        let idx: Vec<usize> = range.collect();
        self.batch_by_indices(&idx)
    }

    /// Arbitrary index selection as a batch (shuffled minibatches, the
    /// frozen evaluation subsample).
    pub fn batch_by_indices(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Domain("empty batch selection".into()));
        }
        let d = self.dims();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "example",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.inputs.row_slice(i));
            labels.push(self.labels[i]);
        }
        Batch::new(
            Mat::from_vec(indices.len(), d, data),
            Targets::Classes(labels),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("empty dataset".into()));
        }
        if self.labels.len() != self.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                self.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Balanced two-class synthetic task, deterministic per seed, inputs scaled
/// per-dimension into [0,1].
///
/// All three kinds embed a 2-class geometry whose class gap is `margin` in
/// raw units before scaling; negative margins overlap the classes, which is
/// the knob that makes memorization (and robust overfitting) possible.
/// Noise is Gaussian truncated at 3σ with σ = 0.1, so a positive margin is
/// a hard separation guarantee.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    dims: usize,
    margin: f64,
    seed: u64,
    split: SplitTag,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Domain(format!("need n ≥ 2 examples, got {n}")));
    }
    if dims < 2 {
        return Err(Error::Domain(format!("need dims ≥ 2, got {dims}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = vec![0.0; n * dims];
    let mut labels = vec![0usize; n];
    // Balanced classes, ±1 example when n is odd; interleave deterministically.
    for (i, label) in labels.iter_mut().enumerate() {
        *label = i % 2;
    }

    const SIGMA: f64 = 0.1;
    const R: f64 = 3.0 * SIGMA;
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        // Truncated at 3σ so positive margins separate exactly.
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 3.0 {
                return SIGMA * z;
            }
        }
    };

    for i in 0..n {
        let y = labels[i];
        let row = &mut raw[i * dims..(i + 1) * dims];
        match kind {
            SyntheticKind::GaussianBlobs => {
                // Centers 2R + margin apart along the first axis.
                let center = if y == 0 { 0.0 } else { 2.0 * R + margin };
                row[0] = center + noise(&mut rng);
                for v in row.iter_mut().skip(1) {
                    *v = noise(&mut rng);
                }
            }
            SyntheticKind::TwoMoons => {
                // Interleaved half-circles in the first two coordinates with
                // radial noise; vertical gap = margin.
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let radius = 1.0;
                let (cx, cy) = if y == 0 {
                    (theta.cos() * radius, theta.sin() * radius)
                } else {
                    (
                        1.0 - theta.cos() * radius,
                        -theta.sin() * radius - margin + 2.0 * R,
                    )
                };
                row[0] = cx + noise(&mut rng);
                row[1] = cy + noise(&mut rng);
                for v in row.iter_mut().skip(2) {
                    *v = noise(&mut rng);
                }
            }
            SyntheticKind::Rings => {
                // Concentric rings in the first two coordinates with radial
                // gap = margin.
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let radius = if y == 0 { 1.0 } else { 1.0 + 2.0 * R + margin };
                let r = radius + noise(&mut rng);
                row[0] = r * theta.cos();
                row[1] = r * theta.sin();
                for v in row.iter_mut().skip(2) {
                    *v = noise(&mut rng);
                }
            }
        }
    }

    // Per-dimension min-max scaling into [0, 1].
    for j in 0..dims {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            lo = lo.min(raw[i * dims + j]);
            hi = hi.max(raw[i * dims + j]);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..n {
            raw[i * dims + j] = (raw[i * dims + j] - lo) / span;
        }
    }

    let ds = Dataset {
        inputs: Mat::from_vec(n, dims, raw),
        labels,
        classes: 2,
        split,
        provenance: Provenance::Synthetic {
            kind,
            n,
            dims,
            margin,
            seed,
        },
    };
    ds.validate()?;
    Ok(ds)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: file truncated at offset {at}")))
}

/// Parse an IDX image/label pair: big-endian magic 0x00000803 for u8 images
/// with dims [n, rows, cols], 0x00000801 for labels; pixels scale to [0,1]
/// by /255 in row-major order.
pub fn read_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let mut image_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut image_bytes)?;
    let mut label_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut label_bytes)?;

    let magic = read_u32_be(&image_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: expected magic {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let n = read_u32_be(&image_bytes, 4, "images")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "images")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "images")? as usize;
    let pixel_count = n * rows * cols;
    let pixels = image_bytes
        .get(16..16 + pixel_count)
        .ok_or_else(|| Error::Format("images: payload shorter than header promises".into()))?;

    let lmagic = read_u32_be(&label_bytes, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: expected magic {IDX_LABELS_MAGIC:#010x}, got {lmagic:#010x}"
        )));
    }
    let ln = read_u32_be(&label_bytes, 4, "labels")? as usize;
    if ln != n {
        return Err(Error::Consistency(format!(
            "{n} images but {ln} labels"
        )));
    }
    let label_payload = label_bytes
        .get(8..8 + ln)
        .ok_or_else(|| Error::Format("labels: payload shorter than header promises".into()))?;

    let inputs: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);

    let ds = Dataset {
        inputs: Mat::from_vec(n, rows * cols, inputs),
        labels,
        classes,
        split,
        provenance: Provenance::File {
            images: images_path.display().to_string(),
            labels: labels_path.display().to_string(),
        },
    };
    ds.validate()?;
    Ok(ds)
}
