//! Affine alignment of monocular depth to sparse geometry. A per-view
//! scale/shift pair is fit by Adam against projected sparse depths, with a
//! soft penalty keeping transformed depths positive and a one-shot prune of
//! the worst residuals once the fit first converges. The reported alignment
//! loss feeds the adaptive depth-loss weight downstream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project_point, CameraModel, Raster, SparsePointSet};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("insufficient constraints: {valid} valid target pixels, need at least 2")]
    InsufficientConstraints { valid: usize },
    #[error("objective diverged (non-finite) at step {step}")]
    Diverged { step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Optimizer settings for [`align_depth`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Initial Adam learning rate.
    pub learning_rate: f64,
    /// Per-step multiplicative learning-rate decay.
    pub decay: f64,
    /// Step cap per optimization phase (before and after pruning).
    pub max_steps: usize,
    /// Relative objective-change threshold for convergence.
    pub convergence_threshold: f64,
    /// Consecutive below-threshold steps required before stopping; guards
    /// against coincidentally tiny changes during the oscillatory transient.
    pub convergence_patience: usize,
    /// Weight of the negative-depth penalty.
    pub negative_penalty: f64,
    /// Fraction of target pixels pruned (once) after first convergence.
    pub prune_fraction: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            decay: 0.999,
            max_steps: 1000,
            convergence_threshold: 1e-5,
            convergence_patience: 3,
            negative_penalty: 1.0,
            prune_fraction: 1e-3,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("convergence_threshold", self.convergence_threshold),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(AlignError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(AlignError::InvalidConfig(format!(
                "decay must lie in (0,1], got {}",
                self.decay
            )));
        }
        if self.max_steps == 0 || self.convergence_patience == 0 {
            return Err(AlignError::InvalidConfig(
                "max_steps and convergence_patience must be >= 1".into(),
            ));
        }
        if !(self.negative_penalty >= 0.0) || !self.negative_penalty.is_finite() {
            return Err(AlignError::InvalidConfig(format!(
                "negative_penalty must be nonnegative, got {}",
                self.negative_penalty
            )));
        }
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return Err(AlignError::InvalidConfig(format!(
                "prune_fraction must lie in [0,1], got {}",
                self.prune_fraction
            )));
        }
        Ok(())
    }
}

/// Result of one per-view alignment.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    /// Fitted scale α.
    pub scale: f64,
    /// Fitted shift β.
    pub shift: f64,
    /// α·D_init + β applied to the full raster (validity preserved).
    pub aligned_depth: Raster,
    /// Weighted mean squared residual over the surviving target pixels.
    pub alignment_loss: f64,
    /// Surviving target-pixel count after pruning.
    pub valid_count: usize,
}

/// Projects sparse points into a view, producing a per-pixel depth target
/// raster and a weight raster (w = 1/(1 + reprojection error)). Points land
/// on their nearest pixel; colliding points keep the smaller depth. Pixels
/// without any projected point are invalid. An empty point set yields
/// all-invalid rasters, not an error.
pub fn project_sparse_depth(points: &SparsePointSet, cam: &CameraModel) -> (Raster, Raster) {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let mut target = Raster::new(w, h, 1).expect("camera dims are positive");
    let mut weights = target.clone();
    for i in 0..w * h {
        let (x, y) = (i % w, i / w);
        target.set_valid(x, y, false);
        weights.set_valid(x, y, false);
    }
    for (i, p) in points.points.iter().enumerate() {
        let Some((pixel, depth)) = project_point(cam, p) else {
            continue;
        };
        if depth <= 0.0 {
            continue;
        }
        let (px, py) = (pixel[0].round(), pixel[1].round());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let (x, y) = (px as usize, py as usize);
        if target.is_valid(x, y) && (target.get(x, y, 0) as f64) <= depth {
            continue; // an equal or closer point already owns the pixel
        }
        target.set_valid(x, y, true);
        weights.set_valid(x, y, true);
        target.set(x, y, 0, depth as f32);
        weights.set(x, y, 0, points.weight(i) as f32);
    }
    (target, weights)
}

struct Sample {
    init: f64,
    target: f64,
    weight: f64,
}

/// Data objective Σ w·(t − (α·d + β))² plus the negative-depth penalty
/// λ·Σ max(0, −(α·d + β))² over all valid initial depths; returns
/// (objective, ∂/∂α, ∂/∂β).
fn objective(
    samples: &[Sample],
    all_depths: &[f64],
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> (f64, f64, f64) {
    let mut f = 0.0;
    let mut ga = 0.0;
    let mut gb = 0.0;
    for s in samples {
        let r = s.target - (alpha * s.init + beta);
        f += s.weight * r * r;
        let c = -2.0 * s.weight * r;
        ga += c * s.init;
        gb += c;
    }
    for &d in all_depths {
        let y = alpha * d + beta;
        if y < 0.0 {
            f += lambda * y * y;
            ga += 2.0 * lambda * y * d;
            gb += 2.0 * lambda * y;
        }
    }
    (f, ga, gb)
}

/// Weighted mean squared residual over the samples at (α, β).
fn mean_weighted_residual(samples: &[Sample], alpha: f64, beta: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let r = s.target - (alpha * s.init + beta);
            s.weight * r * r
        })
        .sum();
    sum / samples.len() as f64
}

/// Indices of the `count` samples with the largest weighted squared
/// residuals at (α, β); ties resolve to the lower index.
fn prune_candidates(samples: &[Sample], count: usize, alpha: f64, beta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = {
            let r = samples[a].target - (alpha * samples[a].init + beta);
            samples[a].weight * r * r
        };
        let rb = {
            let r = samples[b].target - (alpha * samples[b].init + beta);
            samples[b].weight * r * r
        };
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut removed: Vec<usize> = order.into_iter().take(count).collect();
    removed.sort_unstable();
    removed
}

enum Phase {
    Converged,
    StepLimit,
    Diverged(usize),
}

/// Fixed weighted standardization of both fit axes, d̃ = (d − μ_d)/σ_d and
/// t̃ = (t − μ_t)/σ_t. The descent runs on (a, b) in t̃ ≈ a·d̃ + b, where the
/// optimum is (weighted correlation, 0) — always order one — and the data
/// Hessian is a multiple of the identity. Raw (α, β) coordinates instead go
/// near-singular when the depths sit in a narrow band away from zero, and
/// there the fixed-size opening steps either stall in a limit cycle or
/// detonate the negative-depth penalty, poisoning the step normalizer until
/// the plateau stop fires early. Maps back through α = a·σ_t/σ_d and
/// β = μ_t + σ_t·(b − a·μ_d/σ_d); the objective, the optimum, and the
/// initialization (α, β) = (1, 0) are unchanged.
struct FitScaling {
    mu_d: f64,
    sigma_d: f64,
    mu_t: f64,
    sigma_t: f64,
}

impl FitScaling {
    fn from_samples(samples: &[Sample]) -> Self {
        let sw: f64 = samples.iter().map(|s| s.weight).sum();
        if sw <= 0.0 {
            return Self {
                mu_d: 0.0,
                sigma_d: 1.0,
                mu_t: 0.0,
                sigma_t: 1.0,
            };
        }
        let stats = |value: fn(&Sample) -> f64| {
            let mu = samples.iter().map(|s| s.weight * value(s)).sum::<f64>() / sw;
            let var = samples
                .iter()
                .map(|s| s.weight * (value(s) - mu) * (value(s) - mu))
                .sum::<f64>()
                / sw;
            let sigma = var.sqrt();
            // A degenerate axis (all values equal) is centered only.
            if sigma > 1e-12 * mu.abs().max(1.0) {
                (mu, sigma)
            } else {
                (mu, 1.0)
            }
        };
        let (mu_d, sigma_d) = stats(|s| s.init);
        let (mu_t, sigma_t) = stats(|s| s.target);
        Self {
            mu_d,
            sigma_d,
            mu_t,
            sigma_t,
        }
    }

    fn alpha_beta(&self, a: f64, b: f64) -> (f64, f64) {
        let alpha = a * self.sigma_t / self.sigma_d;
        (alpha, self.mu_t + self.sigma_t * b - alpha * self.mu_d)
    }

    /// The standardized image of (α, β) = (1, 0).
    fn init(&self) -> (f64, f64) {
        (
            self.sigma_d / self.sigma_t,
            (self.mu_d - self.mu_t) / self.sigma_t,
        )
    }

    /// Chain rule from original-space gradients to (a, b).
    fn pull_back(&self, g_alpha: f64, g_beta: f64) -> (f64, f64) {
        (
            (g_alpha - g_beta * self.mu_d) * self.sigma_t / self.sigma_d,
            g_beta * self.sigma_t,
        )
    }
}

/// Adam descent on the standardized parameters (a, b); returns the phase
/// outcome. `step` carries the global step counter across phases so the
/// learning-rate schedule and moments continue rather than restart after
/// pruning.
#[allow(clippy::too_many_arguments)]
fn descend(
    samples: &[Sample],
    all_depths: &[f64],
    cfg: &AlignConfig,
    scaling: &FitScaling,
    a: &mut f64,
    b: &mut f64,
    moments: &mut [f64; 4],
    step: &mut usize,
    prev_objective: &mut f64,
) -> Phase {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut calm_streak = 0usize;
    for _ in 0..cfg.max_steps {
        let (alpha, beta) = scaling.alpha_beta(*a, *b);
        let (f, g_alpha, g_beta) = objective(samples, all_depths, cfg.negative_penalty, alpha, beta);
        if !f.is_finite() {
            return Phase::Diverged(*step);
        }
        let rel = (f - *prev_objective).abs() / prev_objective.abs().max(1e-12);
        *prev_objective = f;
        if rel < cfg.convergence_threshold {
            calm_streak += 1;
            if calm_streak >= cfg.convergence_patience {
                return Phase::Converged;
            }
        } else {
            calm_streak = 0;
        }
        let (ga, gb) = scaling.pull_back(g_alpha, g_beta);
        *step += 1;
        let t = *step as f64;
        let lr = cfg.learning_rate * cfg.decay.powi(*step as i32 - 1);
        for (param, grad, mi) in [(&mut *a, ga, 0usize), (&mut *b, gb, 2)] {
            moments[mi] = BETA1 * moments[mi] + (1.0 - BETA1) * grad;
            moments[mi + 1] = BETA2 * moments[mi + 1] + (1.0 - BETA2) * grad * grad;
            let m_hat = moments[mi] / (1.0 - BETA1.powf(t));
            let v_hat = moments[mi + 1] / (1.0 - BETA2.powf(t));
            *param -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Phase::StepLimit
}

/// Fits α, β minimizing the weighted squared error between `target` and
/// α·`initial` + β over the jointly valid pixel set, with a soft penalty on
/// negative transformed depths. After the fit first converges, the worst
/// ⌈prune_fraction·|Ω|⌉ weighted residuals are dropped once and optimization
/// resumes. Returns the transformed full-raster depth and the final mean
/// weighted squared residual over the surviving pixels.
pub fn align_depth(
    initial: &Raster,
    target: &Raster,
    weights: &Raster,
    cfg: &AlignConfig,
) -> Result<AlignmentResult, AlignError> {
    cfg.validate()?;
    if !initial.same_shape(target) || !initial.same_shape(weights) || initial.channels() != 1 {
        return Err(AlignError::DimensionMismatch(format!(
            "initial {}x{}x{}, target {}x{}x{}, weights {}x{}x{}",
            initial.width(),
            initial.height(),
            initial.channels(),
            target.width(),
            target.height(),
            target.channels(),
            weights.width(),
            weights.height(),
            weights.channels(),
        )));
    }
    let (w, h) = (initial.width(), initial.height());
    let mut samples = Vec::new();
    let mut all_depths = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if initial.is_valid(x, y) {
                all_depths.push(initial.get(x, y, 0) as f64);
                if target.is_valid(x, y) && weights.is_valid(x, y) {
                    samples.push(Sample {
                        init: initial.get(x, y, 0) as f64,
                        target: target.get(x, y, 0) as f64,
                        weight: weights.get(x, y, 0) as f64,
                    });
                }
            }
        }
    }
    if samples.len() < 2 {
        return Err(AlignError::InsufficientConstraints {
            valid: samples.len(),
        });
    }

    let scaling = FitScaling::from_samples(&samples);
    let (mut a, mut b) = scaling.init();
    let mut moments = [0.0f64; 4];
    let mut step = 0usize;
    let mut prev = f64::INFINITY;
    match descend(
        &samples,
        &all_depths,
        cfg,
        &scaling,
        &mut a,
        &mut b,
        &mut moments,
        &mut step,
        &mut prev,
    ) {
        Phase::Diverged(s) => return Err(AlignError::Diverged { step: s }),
        Phase::Converged | Phase::StepLimit => {}
    }
    let (mut alpha, mut beta) = scaling.alpha_beta(a, b);

    // One-shot outlier prune, then resume with the same optimizer state
    // (including the standardization, so the moments stay consistent).
    // Skipped when it would leave fewer than the two samples the fit needs.
    let prune_count = (cfg.prune_fraction * samples.len() as f64).ceil() as usize;
    if prune_count > 0 && samples.len() - prune_count >= 2 {
        let removed = prune_candidates(&samples, prune_count, alpha, beta);
        for &i in removed.iter().rev() {
            samples.swap_remove(i);
        }
        // swap_remove disturbs order; restore pixel order determinism is
        // unnecessary for the objective (sum is recomputed), but keep the
        // original relative order for reproducible summation anyway.
        samples.sort_by(|a, b| {
            (a.init, a.target, a.weight)
                .partial_cmp(&(b.init, b.target, b.weight))
                .unwrap()
        });
        prev = f64::INFINITY;
        match descend(
            &samples,
            &all_depths,
            cfg,
            &scaling,
            &mut a,
            &mut b,
            &mut moments,
            &mut step,
            &mut prev,
        ) {
            Phase::Diverged(s) => return Err(AlignError::Diverged { step: s }),
            Phase::Converged | Phase::StepLimit => {}
        }
        (alpha, beta) = scaling.alpha_beta(a, b);
    }

    let mut aligned = initial.clone();
    for y in 0..h {
        for x in 0..w {
            if aligned.is_valid(x, y) {
                let v = alpha * initial.get(x, y, 0) as f64 + beta;
                aligned.set(x, y, 0, v as f32);
            }
        }
    }
    let loss = mean_weighted_residual(&samples, alpha, beta);
    Ok(AlignmentResult {
        scale: alpha,
        shift: beta,
        aligned_depth: aligned,
        alignment_loss: loss,
        valid_count: samples.len(),
    })
}
