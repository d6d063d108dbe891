//! Closed-form bound quantities: the layerwise KL term, the Hessian-based
//! variability bound and its Monte-Carlo ground truth, the optimal layer
//! variances, the weight-curvature index with its Cauchy–Schwarz
//! factorization, and the Catoni constants.
//!
//! Constants dropped from the KL simplification are omitted consistently
//! everywhere, so the equality checks compare constant-free quantities. The
//! Gaussian posterior perturbs weight matrices only, mirroring the layerwise
//! weight variances the KL term is written in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::ParamKind;
use crate::curvature::CurvatureReport;
use crate::error::{Error, Result};
use crate::models::{self, Batch, InputMode, Model};

/// Variance assigned to layers whose clamped trace (or weight norm) is zero,
/// where the optimal-variance formula degenerates. Flagged, never used in
/// equality tests.
pub const SIGMA_CAP: f64 = 1.0;

/// Confidence and loss-range constants of the bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub loss_bound_c: f64,
    pub sample_count: usize,
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("λ must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "α must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.loss_bound_c > 0.0) {
            return Err(Error::Config(format!(
                "loss bound C must be > 0, got {}",
                self.loss_bound_c
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample count must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Gaussian posterior centered at the trained weights with per-layer weight
/// variances; the prior is zero-mean with the same layerwise variances.
#[derive(Clone, Debug)]
pub struct PosteriorSpec {
    pub layer_variances: Vec<f64>,
}

impl PosteriorSpec {
    pub fn new(layer_variances: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = layer_variances
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::Config(format!(
                "layer variance must be finite and ≥ 0, got {bad}"
            )));
        }
        Ok(PosteriorSpec { layer_variances })
    }

    fn check_layers(&self, model: &Model) -> Result<()> {
        if self.layer_variances.len() != model.layer_count() {
            return Err(Error::Config(format!(
                "{} layer variances for a {}-layer model",
                self.layer_variances.len(),
                model.layer_count()
            )));
        }
        Ok(())
    }
}

/// KL term of the simplified bound: Σ_k ‖W_k‖_F² / (2λσ_k²), constant
/// dropped. Requires strictly positive variances.
pub fn kl_term(model: &Model, spec: &PosteriorSpec, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("λ must be > 0, got {lambda}")));
    }
    spec.check_layers(model)?;
    if let Some(&bad) = spec.layer_variances.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Config(format!(
            "kl term needs positive variances, got {bad}"
        )));
    }
    let mut total = 0.0;
    for (k, &var) in spec.layer_variances.iter().enumerate() {
        let fro = models::layer_frobenius_sq(model, k)?;
        total += fro / (2.0 * lambda * var);
    }
    Ok(total)
}

/// Variability bound Σ_k Tr(H_k)⁺ · σ_k².
pub fn variability_bound(report: &CurvatureReport, spec: &PosteriorSpec) -> Result<f64> {
    if report.layers.len() != spec.layer_variances.len() {
        return Err(Error::Config(format!(
            "{} trace layers but {} variances",
            report.layers.len(),
            spec.layer_variances.len()
        )));
    }
    Ok(report
        .layers
        .iter()
        .zip(&spec.layer_variances)
        .map(|(l, &v)| l.trace_clamped * v)
        .sum())
}

/// Monte-Carlo estimate of E_{θ~Q}[L] − L(θ): sample mean and standard
/// error of L(θ + Δθ) − L(θ) with Δθ layerwise Gaussian on weight blocks.
pub fn variability_mc(
    model: &Model,
    batch: &Batch,
    spec: &PosteriorSpec,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::Domain("variability_mc needs samples ≥ 2".into()));
    }
    spec.check_layers(model)?;
    let base_loss = models::loss_tape(model, batch, InputMode::Fixed)?.loss_value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.params.layout().clone();
    let mut diffs = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut params = model.params.clone();
        for entry in layout.entries() {
            if entry.kind != ParamKind::Weight {
                continue;
            }
            let sigma = spec.layer_variances[entry.layer].sqrt();
            for w in params.block_mut(entry) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w += sigma * z;
            }
        }
        let perturbed = model.with_params(params)?;
        let lt = models::loss_tape(&perturbed, batch, InputMode::Fixed)
            .map_err(|e| match e {
                Error::Numeric { message, .. } => Error::numeric_sample(s, message),
                other => other,
            })?;
        let loss = lt.loss_value();
        if !loss.is_finite() {
            return Err(Error::numeric_sample(s, "non-finite perturbed loss"));
        }
        diffs.push(loss - base_loss);
    }
    let mean = diffs.iter().sum::<f64>() / samples as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Per-layer variances minimizing kl_term + variability_bound:
/// σ_k² = √(‖W_k‖_F² / (2λ·Tr(H_k)⁺)). Layers where the formula degenerates
/// (zero clamped trace or zero weight norm) get [`SIGMA_CAP`] and a flag.
#[derive(Clone, Debug)]
pub struct OptimalSigmas {
    pub spec: PosteriorSpec,
    pub degenerate: Vec<bool>,
}

pub fn optimal_sigmas(model: &Model, report: &CurvatureReport, lambda: f64) -> Result<OptimalSigmas> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("λ must be > 0, got {lambda}")));
    }
    if report.layers.len() != model.layer_count() {
        return Err(Error::Config(format!(
            "{} trace layers for a {}-layer model",
            report.layers.len(),
            model.layer_count()
        )));
    }
    let mut variances = Vec::with_capacity(report.layers.len());
    let mut degenerate = Vec::with_capacity(report.layers.len());
    for l in &report.layers {
        let fro = models::layer_frobenius_sq(model, l.layer)?;
        if l.trace_clamped > 0.0 && fro > 0.0 {
            variances.push((fro / (2.0 * lambda * l.trace_clamped)).sqrt());
            degenerate.push(false);
        } else {
            variances.push(SIGMA_CAP);
            degenerate.push(true);
        }
    }
    Ok(OptimalSigmas {
        spec: PosteriorSpec::new(variances)?,
        degenerate,
    })
}

/// The weight-curvature index and its Cauchy–Schwarz factorization.
#[derive(Clone, Debug)]
pub struct WciReport {
    /// √(‖W_k‖_F² · Tr(H_k)⁺) per layer.
    pub per_layer_terms: Vec<f64>,
    pub wci: f64,
    pub cs_weight_sum: f64,
    pub cs_trace_sum: f64,
    /// √(Σ‖W_k‖²) · √(ΣTr⁺): never smaller than `wci`.
    pub cs_bound: f64,
    pub clamp_count: usize,
}

pub fn wci(model: &Model, report: &CurvatureReport) -> Result<WciReport> {
    if report.layers.len() != model.layer_count() {
        return Err(Error::Config(format!(
            "{} trace layers for a {}-layer model",
            report.layers.len(),
            model.layer_count()
        )));
    }
    let mut per_layer = Vec::with_capacity(report.layers.len());
    let mut weight_sum = 0.0;
    let mut trace_sum = 0.0;
    for l in &report.layers {
        let fro = models::layer_frobenius_sq(model, l.layer)?;
        per_layer.push((fro * l.trace_clamped).sqrt());
        weight_sum += fro;
        trace_sum += l.trace_clamped;
    }
    Ok(WciReport {
        wci: per_layer.iter().sum(),
        per_layer_terms: per_layer,
        cs_weight_sum: weight_sum,
        cs_trace_sum: trace_sum,
        cs_bound: (weight_sum * trace_sum).sqrt(),
        clamp_count: report.clamp_count(),
    })
}

/// The Cauchy–Schwarz inequality instance: lhs = WCI, rhs = the factored
/// bound, tight iff ‖W_k‖²/Tr_k is constant across layers (within 1e-9,
/// checked through cross products so zero traces are handled).
#[derive(Clone, Copy, Debug)]
pub struct CsBoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub tight: bool,
}

pub fn wci_cs_bound(model: &Model, report: &CurvatureReport) -> Result<CsBoundCheck> {
    let w = wci(model, report)?;
    let mut pairs = Vec::with_capacity(report.layers.len());
    for l in &report.layers {
        pairs.push((models::layer_frobenius_sq(model, l.layer)?, l.trace_clamped));
    }
    let mut tight = true;
    for win in pairs.windows(2) {
        let (a0, b0) = win[0];
        let (a1, b1) = win[1];
        let cross = a0 * b1 - a1 * b0;
        if cross.abs() > 1e-9 * (1.0 + (a0 * b1).abs() + (a1 * b0).abs()) {
            tight = false;
            break;
        }
    }
    Ok(CsBoundCheck {
        lhs: w.wci,
        rhs: w.cs_bound,
        tight,
    })
}

/// Catoni constant term: λC²/(8|S|) − ln(α)/λ.
pub fn catoni_terms(cfg: &BoundConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.lambda * cfg.loss_bound_c.powi(2) / (8.0 * cfg.sample_count as f64)
        - cfg.alpha.ln() / cfg.lambda)
}

/// Closed-form minimizer of the Catoni constant plus KL/λ over λ:
/// λ* = √(8|S|(KL − ln α)) / C.
pub fn catoni_optimal_lambda(kl: f64, alpha: f64, loss_bound_c: f64, sample_count: usize) -> f64 {
    (8.0 * sample_count as f64 * (kl - alpha.ln())).sqrt() / loss_bound_c
}

/// Largest per-example loss over a batch; the empirical stand-in for the
/// loss range C when the loss is unbounded (cross-entropy).
pub fn empirical_loss_bound(model: &Model, batch: &Batch) -> Result<f64> {
    let lt = models::loss_tape(model, batch, InputMode::Fixed)?;
    Ok(lt
        .per_example_losses()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// All bound quantities side by side.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub kl_term: f64,
    pub variability_bound: f64,
    /// kl_term + variability_bound; ≥ wci_term for every posterior, with
    /// equality at the optimal variances.
    pub bound_sum: f64,
    /// √(2/λ) · WCI.
    pub wci_term: f64,
    pub catoni_const: f64,
    /// wci_term + catoni_const: the closed-form bound value at the optimal
    /// variances, up to the constants dropped throughout.
    pub combined_bound: f64,
    pub wci: WciReport,
    pub lambda: f64,
}

pub fn bound_report(
    model: &Model,
    report: &CurvatureReport,
    cfg: &BoundConfig,
    spec: &PosteriorSpec,
) -> Result<BoundReport> {
    cfg.validate()?;
    let kl = kl_term(model, spec, cfg.lambda)?;
    let variability = variability_bound(report, spec)?;
    let w = wci(model, report)?;
    let wci_term = (2.0 / cfg.lambda).sqrt() * w.wci;
    let catoni = catoni_terms(cfg)?;
    Ok(BoundReport {
        kl_term: kl,
        variability_bound: variability,
        bound_sum: kl + variability,
        wci_term,
        catoni_const: catoni,
        combined_bound: wci_term + catoni,
        wci: w,
        lambda: cfg.lambda,
    })
}

/// Evaluate the bound at the optimal variances over a log-spaced λ grid.
pub fn lambda_sweep(
    model: &Model,
    report: &CurvatureReport,
    alpha: f64,
    loss_bound_c: f64,
    sample_count: usize,
    lambda_lo: f64,
    lambda_hi: f64,
    points: usize,
) -> Result<Vec<BoundReport>> {
    if !(lambda_lo > 0.0 && lambda_hi > lambda_lo && points >= 2) {
        return Err(Error::Config(
            "lambda sweep needs 0 < lo < hi and at least two points".into(),
        ));
    }
    let log_lo = lambda_lo.ln();
    let log_hi = lambda_hi.ln();
    let mut out = Vec::with_capacity(points);
    for i in 0..points {
        let lambda = (log_lo + (log_hi - log_lo) * i as f64 / (points - 1) as f64).exp();
        let cfg = BoundConfig {
            lambda,
            alpha,
            loss_bound_c,
            sample_count,
        };
        let sigmas = optimal_sigmas(model, report, lambda)?;
        out.push(bound_report(model, report, &cfg, &sigmas.spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{DeltaPolicy, Estimator, LayerTrace};
    use crate::models::{build, LossKind, ModelSpec};

    fn fixed_model(fro_per_layer: &[f64]) -> Model {
        // widths 1 → 1 → ... so each layer has exactly one weight; set the
        // single weight to √fro so ‖W_k‖² is as requested.
        let widths = vec![1; fro_per_layer.len() + 1];
        let spec = ModelSpec::new(widths, LossKind::Squared, false, 0);
        let mut m = build(&spec).unwrap();
        for (k, &f) in fro_per_layer.iter().enumerate() {
            m.params.flat_mut()[k] = f.sqrt();
        }
        m
    }

    fn traces(raw: &[f64]) -> CurvatureReport {
        CurvatureReport {
            layers: raw
                .iter()
                .enumerate()
                .map(|(k, &t)| LayerTrace {
                    layer: k,
                    trace_raw: t,
                    trace_clamped: t.max(0.0),
                    estimator: Estimator::Exact,
                    probes: 1,
                    stderr: 0.0,
                })
                .collect(),
            eval_batch_id: 0,
            delta_policy: DeltaPolicy::Frozen,
        }
    }

    #[test]
    fn kl_term_single_layer_hand_value() {
        // ‖W‖² = 4, σ² = 1, λ = 2 → 4/(2·2·1) = 1.
        let m = fixed_model(&[4.0]);
        let spec = PosteriorSpec::new(vec![1.0]).unwrap();
        assert!((kl_term(&m, &spec, 2.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_term_zero_weights_is_zero() {
        let m = fixed_model(&[0.0]);
        let spec = PosteriorSpec::new(vec![0.7]).unwrap();
        assert_eq!(kl_term(&m, &spec, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_term_two_layer_hand_value() {
        // (4, σ²=1) and (9, σ²=0.5) at λ = 1 → 2 + 9 = 11.
        let m = fixed_model(&[4.0, 9.0]);
        let spec = PosteriorSpec::new(vec![1.0, 0.5]).unwrap();
        assert!((kl_term(&m, &spec, 1.0).unwrap() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn kl_term_rejects_nonpositive_lambda() {
        let m = fixed_model(&[4.0]);
        let spec = PosteriorSpec::new(vec![1.0]).unwrap();
        assert!(matches!(
            kl_term(&m, &spec, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variability_bound_is_trace_dot_variance() {
        // traces (2, 4), σ² = (0.5, 0.25) → 1 + 1 = 2.
        let r = traces(&[2.0, 4.0]);
        let spec = PosteriorSpec::new(vec![0.5, 0.25]).unwrap();
        assert_eq!(variability_bound(&r, &spec).unwrap(), 2.0);
    }

    #[test]
    fn variability_bound_vanishes_with_sigma() {
        let r = traces(&[2.0, 4.0]);
        let spec = PosteriorSpec::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(variability_bound(&r, &spec).unwrap(), 0.0);
    }

    #[test]
    fn variability_layer_mismatch_is_config_error() {
        let r = traces(&[2.0]);
        let spec = PosteriorSpec::new(vec![0.5, 0.25]).unwrap();
        assert!(matches!(
            variability_bound(&r, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn optimal_sigma_hand_values() {
        // ‖W‖² = 2, λ = 1, Tr = 4 → σ² = √(2/8) = 0.5.
        let m = fixed_model(&[2.0]);
        let s = optimal_sigmas(&m, &traces(&[4.0]), 1.0).unwrap();
        assert!((s.spec.layer_variances[0] - 0.5).abs() < 1e-15);
        assert!(!s.degenerate[0]);
        // Tr = 8 → √(2/16) ≈ 0.353553.
        let s = optimal_sigmas(&m, &traces(&[8.0]), 1.0).unwrap();
        assert!((s.spec.layer_variances[0] - 0.353_553_390_593_273_8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_layers_get_capped_and_flagged() {
        let m = fixed_model(&[2.0, 3.0]);
        let s = optimal_sigmas(&m, &traces(&[0.0, -1.0]), 1.0).unwrap();
        assert_eq!(s.spec.layer_variances, vec![SIGMA_CAP, SIGMA_CAP]);
        assert_eq!(s.degenerate, vec![true, true]);
    }

    #[test]
    fn wci_hand_values() {
        // Single layer ‖W‖² = 4, Tr = 9 → WCI = 6.
        let m = fixed_model(&[4.0]);
        let w = wci(&m, &traces(&[9.0])).unwrap();
        assert!((w.wci - 6.0).abs() < 1e-12);
        // Zero weights → 0.
        let m0 = fixed_model(&[0.0]);
        assert_eq!(wci(&m0, &traces(&[9.0])).unwrap().wci, 0.0);
        // Layers (4, 9) and (1, 16) → 6 + 4 = 10.
        let m2 = fixed_model(&[4.0, 1.0]);
        let w2 = wci(&m2, &traces(&[9.0, 16.0])).unwrap();
        assert!((w2.wci - 10.0).abs() < 1e-12);
        assert_eq!(w2.per_layer_terms.len(), 2);
        assert!(w2.wci <= w2.cs_bound);
    }

    #[test]
    fn cs_bound_hand_values_and_tightness() {
        // (4, 9), (1, 16): rhs = √5·√25 ≈ 11.1803 ≥ lhs = 10.
        let m = fixed_model(&[4.0, 1.0]);
        let c = wci_cs_bound(&m, &traces(&[9.0, 16.0])).unwrap();
        assert!((c.lhs - 10.0).abs() < 1e-12);
        assert!((c.rhs - 125.0f64.sqrt()).abs() < 1e-12);
        assert!(!c.tight);
        // Proportional layers (4, 8), (1, 2): lhs = rhs = 5√2, tight.
        let m2 = fixed_model(&[4.0, 1.0]);
        let c2 = wci_cs_bound(&m2, &traces(&[8.0, 2.0])).unwrap();
        assert!((c2.lhs - 50.0f64.sqrt()).abs() < 1e-12);
        assert!((c2.rhs - c2.lhs).abs() < 1e-12);
        assert!(c2.tight);
        // Single layer is always tight.
        let m1 = fixed_model(&[4.0]);
        let c1 = wci_cs_bound(&m1, &traces(&[9.0])).unwrap();
        assert_eq!(c1.lhs, c1.rhs);
        assert!(c1.tight);
    }

    #[test]
    fn catoni_hand_value() {
        // λ = 4, C = 2, |S| = 100, α = e⁻¹ → 16/800 + 1/4 = 0.27.
        let cfg = BoundConfig {
            lambda: 4.0,
            alpha: (-1.0f64).exp(),
            loss_bound_c: 2.0,
            sample_count: 100,
        };
        assert!((catoni_terms(&cfg).unwrap() - 0.27).abs() < 1e-15);
    }

    #[test]
    fn catoni_alpha_near_one_leaves_only_complexity() {
        let cfg = BoundConfig {
            lambda: 4.0,
            alpha: 1.0 - 1e-12,
            loss_bound_c: 2.0,
            sample_count: 100,
        };
        let v = catoni_terms(&cfg).unwrap();
        assert!((v - 0.02).abs() < 1e-9);
    }

    #[test]
    fn bound_report_hand_case_reaches_amgm_equality() {
        // Single layer ‖W‖² = 2, Tr = 4, λ = 1, σ² = 0.5:
        // kl = 2, var = 2, sum = 4 = √2 · √8.
        let m = fixed_model(&[2.0]);
        let cfg = BoundConfig {
            lambda: 1.0,
            alpha: 0.05,
            loss_bound_c: 1.0,
            sample_count: 100,
        };
        let spec = PosteriorSpec::new(vec![0.5]).unwrap();
        let r = bound_report(&m, &traces(&[4.0]), &cfg, &spec).unwrap();
        assert!((r.kl_term - 2.0).abs() < 1e-12);
        assert!((r.variability_bound - 2.0).abs() < 1e-12);
        assert!((r.bound_sum - 4.0).abs() < 1e-12);
        assert!((r.wci_term - 4.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_sigma_exceeds_wci_term_strictly() {
        let m = fixed_model(&[2.0]);
        let cfg = BoundConfig {
            lambda: 1.0,
            alpha: 0.05,
            loss_bound_c: 1.0,
            sample_count: 100,
        };
        let spec = PosteriorSpec::new(vec![1.0]).unwrap();
        let r = bound_report(&m, &traces(&[4.0]), &cfg, &spec).unwrap();
        assert!(r.bound_sum > r.wci_term + 1e-6);
    }

    #[test]
    fn lambda_sweep_is_log_spaced_and_valid() {
        let m = fixed_model(&[2.0, 5.0]);
        let reports = lambda_sweep(&m, &traces(&[4.0, 1.0]), 0.05, 2.0, 100, 0.1, 10.0, 5).unwrap();
        assert_eq!(reports.len(), 5);
        assert!((reports[0].lambda - 0.1).abs() < 1e-12);
        assert!((reports[4].lambda - 10.0).abs() < 1e-9);
        for r in &reports {
            assert!((r.bound_sum - r.wci_term).abs() < 1e-10);
        }
    }
}
