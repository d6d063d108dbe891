//! Shared oracles for the integration suites. Everything here recomputes
//! quantities through routes independent of the library's gradient/HVP
//! machinery: straight-line forward passes and finite differences over the
//! loss evaluation only.

#![allow(dead_code)]

use wci_lab::autodiff::{Mat, ParamKind, ParamVector};
use wci_lab::models::{self, Batch, InputMode, LossKind, Model, ModelSpec, Targets};

/// Relative discrepancy with a floor so near-zero components stay meaningful.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss at given parameters through the library's evaluation path.
pub fn loss_at(model: &Model, params: &ParamVector, batch: &Batch) -> f64 {
    let m = model.with_params(params.clone()).unwrap();
    models::loss_tape(&m, batch, InputMode::Fixed)
        .unwrap()
        .loss_value()
}

/// Central finite-difference gradient over the loss evaluation.
pub fn fd_gradient(model: &Model, batch: &Batch, h: f64) -> ParamVector {
    let mut g = ParamVector::zeros(model.params.layout().clone());
    for i in 0..model.params.len() {
        let mut plus = model.params.clone();
        plus.flat_mut()[i] += h;
        let mut minus = model.params.clone();
        minus.flat_mut()[i] -= h;
        g.flat_mut()[i] = (loss_at(model, &plus, batch) - loss_at(model, &minus, batch)) / (2.0 * h);
    }
    g
}

/// Central finite-difference HVP: (∇L(θ+hv) − ∇L(θ−hv)) / 2h, where ∇L is
/// the library's analytic gradient evaluated at shifted parameters.
pub fn fd_hvp(model: &Model, batch: &Batch, v: &ParamVector, h: f64) -> ParamVector {
    let grad_at = |params: &ParamVector| -> ParamVector {
        let m = model.with_params(params.clone()).unwrap();
        models::loss_tape(&m, batch, InputMode::Fixed)
            .unwrap()
            .gradient()
            .unwrap()
    };
    let mut plus = model.params.clone();
    let mut minus = model.params.clone();
    for i in 0..plus.len() {
        plus.flat_mut()[i] += h * v.flat()[i];
        minus.flat_mut()[i] -= h * v.flat()[i];
    }
    let gp = grad_at(&plus);
    let gm = grad_at(&minus);
    let mut out = ParamVector::zeros(model.params.layout().clone());
    for i in 0..out.len() {
        out.flat_mut()[i] = (gp.flat()[i] - gm.flat()[i]) / (2.0 * h);
    }
    out
}

/// Second-difference diagonal of the Hessian over the loss evaluation:
/// H_ii ≈ (L(θ+h eᵢ) − 2L(θ) + L(θ−h eᵢ)) / h². Its sum over a layer's
/// weight block is the finite-difference block trace.
pub fn fd_diag_trace(model: &Model, batch: &Batch, layer: usize, h: f64) -> f64 {
    let entry = model
        .params
        .layout()
        .entry(layer, ParamKind::Weight)
        .unwrap()
        .clone();
    let base = loss_at(model, &model.params, batch);
    let mut trace = 0.0;
    for i in entry.range() {
        let mut plus = model.params.clone();
        plus.flat_mut()[i] += h;
        let mut minus = model.params.clone();
        minus.flat_mut()[i] -= h;
        trace += (loss_at(model, &plus, batch) - 2.0 * base + loss_at(model, &minus, batch))
            / (h * h);
    }
    trace
}

/// Hand-rolled straight-line forward pass (independent of the tape):
/// row-major matmul, bias add, ReLU between layers.
pub fn straight_line_forward(model: &Model, x: &Mat) -> Mat {
    let spec = &model.spec;
    let mut h = x.clone();
    for k in 0..spec.layer_count() {
        let w_entry = model
            .params
            .layout()
            .entry(k, ParamKind::Weight)
            .unwrap()
            .clone();
        let w = model.params.block(&w_entry);
        let (rows, cols) = (w_entry.rows, w_entry.cols);
        let mut z = Mat::zeros(h.rows, cols);
        for i in 0..h.rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for p in 0..rows {
                    acc += h.get(i, p) * w[p * cols + j];
                }
                z.set(i, j, acc);
            }
        }
        if spec.use_bias {
            let b_entry = model
                .params
                .layout()
                .entry(k, ParamKind::Bias)
                .unwrap()
                .clone();
            let b = model.params.block(&b_entry);
            for i in 0..z.rows {
                for j in 0..cols {
                    z.set(i, j, z.get(i, j) + b[j]);
                }
            }
        }
        if k + 1 < spec.layer_count() {
            for v in &mut z.data {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    h
}

/// Straight-line loss oracle matching the library's loss definitions.
pub fn straight_line_loss(model: &Model, batch: &Batch) -> f64 {
    let out = straight_line_forward(model, &batch.inputs);
    let n = batch.len();
    match (&model.spec.loss, &batch.targets) {
        (LossKind::Squared, Targets::Values(t)) => {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..out.cols {
                    let d = out.get(i, j) - t.get(i, j);
                    total += d * d;
                }
            }
            total / n as f64
        }
        (LossKind::Squared, Targets::Classes(labels)) => {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..out.cols {
                    let t = if labels[i] == j { 1.0 } else { 0.0 };
                    let d = out.get(i, j) - t;
                    total += d * d;
                }
            }
            total / n as f64
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            let mut total = 0.0;
            for i in 0..n {
                let row = out.row_slice(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[labels[i]];
            }
            total / n as f64
        }
        _ => unreachable!("unsupported loss/target combination"),
    }
}

/// Random MLP with seeded parameters and a seeded classification batch.
pub fn random_case(
    widths: &[usize],
    loss: LossKind,
    use_bias: bool,
    n: usize,
    seed: u64,
) -> (Model, Batch) {
    use rand::{Rng, SeedableRng};
    let spec = ModelSpec::new(widths.to_vec(), loss, use_bias, seed);
    let model = models::build(&spec).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let d = widths[0];
    let classes = *widths.last().unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let batch = Batch::new(Mat::from_vec(n, d, data), Targets::Classes(labels)).unwrap();
    (model, batch)
}

/// Random direction vector in the model's layout.
pub fn random_direction(model: &Model, seed: u64) -> ParamVector {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = ParamVector::zeros(model.params.layout().clone());
    for x in v.flat_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    v
}
