//! Training loop: seeded per-epoch view sampling, forward render, combined
//! image/depth objective, analytic backward pass, per-group Adam updates
//! with quaternion renormalization, scheduled opacity pruning, and a
//! per-iteration history log.

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::psnr;
use crate::geom::{
    pack_gaussians, sigmoid, CameraModel, GaussianPrimitive, Raster, SparsePointSet,
    PARAMS_PER_GAUSSIAN,
};
use crate::loss::{adaptive_weight, depth_loss, image_loss, total_loss, LossConfig, LossError};
use crate::render::{render, render_backward, RenderError};
use crate::spatial::KdTree3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite {term} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, term: String },
    #[error("all gaussians pruned at iteration {iteration}")]
    AllPruned { iteration: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Optimizer schedule and ablation switches.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimization iterations (one view per iteration). Desk-scale
    /// default; full-scale runs typically use 30000.
    pub iterations: usize,
    /// Center learning rate, decayed exponentially to `lr_center_final`.
    pub lr_center: f64,
    pub lr_center_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Opacity floor for scheduled pruning; None disables pruning.
    pub prune_opacity_below: Option<f64>,
    /// Iteration period of the pruning pass.
    pub prune_interval: usize,
    /// Snapshot callback period; 0 disables snapshots.
    pub checkpoint_interval: usize,
    /// View-sampling seed.
    pub seed: u64,
    /// When false, depth supervision uses a constant confidence of 1
    /// (ablation: no confidence map).
    pub use_confidence: bool,
    /// When false, λ_d is pinned to lambda_max instead of decaying with the
    /// per-view alignment loss (ablation: fixed depth weight).
    pub adaptive_depth_weight: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr_center: 1.6e-4,
            lr_center_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            prune_opacity_below: Some(0.005),
            prune_interval: 500,
            checkpoint_interval: 0,
            seed: 0,
            use_confidence: true,
            adaptive_depth_weight: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::InvalidInput("iterations must be > 0".into()));
        }
        for (name, v) in [
            ("lr_center", self.lr_center),
            ("lr_center_final", self.lr_center_final),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidInput(format!(
                    "{name} must lie in [0,1), got {b}"
                )));
            }
        }
        if let Some(t) = self.prune_opacity_below {
            if !(0.0..1.0).contains(&t) {
                return Err(TrainError::InvalidInput(format!(
                    "prune_opacity_below must lie in [0,1), got {t}"
                )));
            }
        }
        if self.prune_interval == 0 {
            return Err(TrainError::InvalidInput("prune_interval must be > 0".into()));
        }
        Ok(())
    }
}

/// Depth-supervision inputs attached to a view.
#[derive(Clone, Debug)]
pub struct ViewDepthData {
    /// Scale/shift-corrected depth used as the regression target.
    pub aligned_depth: Raster,
    /// Per-pixel confidence weighting the depth residuals.
    pub confidence: Raster,
    /// The view's final alignment residual, driving the adaptive weight.
    pub alignment_loss: f64,
}

/// One training view; depth supervision is optional per view.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: CameraModel,
    pub image: Raster,
    pub depth: Option<ViewDepthData>,
}

/// Per-iteration log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub image_loss: f64,
    pub depth_loss: f64,
    pub lambda_d: f64,
    pub total_loss: f64,
    /// PSNR of the clamped render against the sampled view's image.
    pub psnr_train: f64,
}

/// Final parameters, optimizer moments, and the full training log.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub iteration: usize,
    pub history: Vec<HistoryRecord>,
}

impl TrainState {
    pub fn gaussians(&self) -> Vec<GaussianPrimitive> {
        self.params
            .chunks(PARAMS_PER_GAUSSIAN)
            .map(GaussianPrimitive::from_params)
            .collect()
    }
}

/// One Gaussian per sparse point: isotropic scale from the mean distance to
/// the 3 nearest neighbors (0.01 world-unit fallback below 4 points),
/// opacity 0.1, identity rotation, and the given color or mid-gray.
pub fn init_from_sparse(
    points: &SparsePointSet,
    colors: Option<&[Vector3<f64>]>,
) -> Result<Vec<GaussianPrimitive>, TrainError> {
    if points.is_empty() {
        return Err(TrainError::InvalidInput(
            "cannot initialize from an empty point set".into(),
        ));
    }
    if let Some(cs) = colors {
        if cs.len() != points.len() {
            return Err(TrainError::InvalidInput(format!(
                "{} points but {} colors",
                points.len(),
                cs.len()
            )));
        }
    }
    let n = points.len();
    let scales: Vec<f64> = if n < 4 {
        vec![0.01; n]
    } else {
        let tree = KdTree3::build(&points.points);
        points
            .points
            .iter()
            .map(|p| {
                // k_nearest includes the query point itself at distance 0.
                let nn = tree.k_nearest(p, 4);
                (nn[1].1 + nn[2].1 + nn[3].1) / 3.0
            })
            .collect()
    };
    points
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let color = colors.map_or(Vector3::new(0.5, 0.5, 0.5), |cs| cs[i]);
            GaussianPrimitive::new(
                *p,
                Vector3::new(scales[i], scales[i], scales[i]),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                0.1,
                color,
            )
            .map_err(|e| TrainError::InvalidInput(e.to_string()))
        })
        .collect()
}

/// Learning rate for a flat parameter index within one Gaussian's block.
fn group_lr(cfg: &TrainConfig, offset: usize, center_lr: f64) -> f64 {
    match offset {
        0..=2 => center_lr,
        3..=5 => cfg.lr_scale,
        6..=9 => cfg.lr_rotation,
        10 => cfg.lr_opacity,
        _ => cfg.lr_color,
    }
}

/// Runs the optimization loop. `snapshot` receives the current Gaussians
/// every `checkpoint_interval` iterations (when nonzero). Deterministic for
/// a fixed seed, config, and thread count.
pub fn train(
    initial: &[GaussianPrimitive],
    views: &[TrainView],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut snapshot: impl FnMut(usize, &[GaussianPrimitive]),
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if initial.is_empty() {
        return Err(TrainError::InvalidInput("no gaussians to optimize".into()));
    }
    if views.is_empty() {
        return Err(TrainError::InvalidInput("need at least one view".into()));
    }
    let (w, h) = (views[0].camera.width(), views[0].camera.height());
    for (i, v) in views.iter().enumerate() {
        if v.image.width() != v.camera.width() as usize
            || v.image.height() != v.camera.height() as usize
            || v.image.channels() != 3
        {
            return Err(TrainError::InvalidInput(format!(
                "view {i}: image does not match its camera dimensions"
            )));
        }
        if v.camera.width() != w || v.camera.height() != h {
            return Err(TrainError::InvalidInput(
                "all views must share one resolution".into(),
            ));
        }
        if let Some(d) = &v.depth {
            if d.aligned_depth.width() != w as usize
                || d.aligned_depth.height() != h as usize
                || !d.aligned_depth.same_shape(&d.confidence)
            {
                return Err(TrainError::InvalidInput(format!(
                    "view {i}: depth/confidence dimensions disagree"
                )));
            }
        }
    }

    let mut params = pack_gaussians(initial);
    let mut adam_m = vec![0.0f64; params.len()];
    let mut adam_v = vec![0.0f64; params.len()];
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let ones_confidence = Raster::from_parts(
        w as usize,
        h as usize,
        1,
        vec![1.0f32; (w * h) as usize],
        vec![true; (w * h) as usize],
    )
    .expect("constant raster");
    let mut adam_step = 0u64;

    for it in 0..cfg.iterations {
        let iteration = it + 1;
        if it % views.len() == 0 {
            order.shuffle(&mut rng);
        }
        let view = &views[order[it % views.len()]];

        let gaussians: Vec<GaussianPrimitive> = params
            .chunks(PARAMS_PER_GAUSSIAN)
            .map(GaussianPrimitive::from_params)
            .collect();
        let rendered = render(&gaussians, &view.camera)?;
        let img_out = image_loss(&rendered.color, &view.image, loss_cfg)?;
        if !img_out.value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                term: "image loss".into(),
            });
        }

        // Depth branch: taken only when supervision exists and the weight
        // ceiling is positive, so λ_max = 0 follows the image-only code
        // path exactly (bitwise regression target).
        let mut depth_term = 0.0;
        let mut lambda_d = 0.0;
        let mut grad_depth: Option<Raster> = None;
        if loss_cfg.lambda_max > 0.0 {
            if let Some(vd) = &view.depth {
                let conf = if cfg.use_confidence {
                    &vd.confidence
                } else {
                    &ones_confidence
                };
                let out = depth_loss(&rendered.depth, &vd.aligned_depth, conf)?;
                lambda_d = if cfg.adaptive_depth_weight {
                    adaptive_weight(vd.alignment_loss, loss_cfg)?
                } else {
                    loss_cfg.lambda_max
                };
                if !out.value.is_finite() || !lambda_d.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        iteration,
                        term: "depth loss".into(),
                    });
                }
                if !out.empty_domain {
                    depth_term = out.value;
                    let mut scaled = out.grad.clone();
                    for y in 0..scaled.height() {
                        for x in 0..scaled.width() {
                            let g = scaled.get(x, y, 0);
                            scaled.set(x, y, 0, (lambda_d * g as f64) as f32);
                        }
                    }
                    grad_depth = Some(scaled);
                }
            }
        }
        let total = total_loss(img_out.value, depth_term, lambda_d);
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                term: "total loss".into(),
            });
        }

        let grads = render_backward(
            &gaussians,
            &view.camera,
            &img_out.grad,
            grad_depth.as_ref(),
        )?;

        // Per-group Adam step with an exponentially decayed center rate.
        adam_step += 1;
        let t = adam_step as f64;
        let center_lr = cfg.lr_center
            * (cfg.lr_center_final / cfg.lr_center).powf(it as f64 / cfg.iterations as f64);
        let bias1 = 1.0 - cfg.adam_beta1.powf(t);
        let bias2 = 1.0 - cfg.adam_beta2.powf(t);
        let mut flat = vec![0.0f64; PARAMS_PER_GAUSSIAN];
        for (gi, grad) in grads.iter().enumerate() {
            grad.write_flat(&mut flat);
            let base = gi * PARAMS_PER_GAUSSIAN;
            for (off, &g) in flat.iter().enumerate() {
                let i = base + off;
                adam_m[i] = cfg.adam_beta1 * adam_m[i] + (1.0 - cfg.adam_beta1) * g;
                adam_v[i] = cfg.adam_beta2 * adam_v[i] + (1.0 - cfg.adam_beta2) * g * g;
                let m_hat = adam_m[i] / bias1;
                let v_hat = adam_v[i] / bias2;
                params[i] -= group_lr(cfg, off, center_lr) * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }

        // Keep rotations on the unit sphere after every step.
        for chunk in params.chunks_mut(PARAMS_PER_GAUSSIAN) {
            let q = Vector4::new(chunk[6], chunk[7], chunk[8], chunk[9]);
            let norm = q.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration,
                    term: "quaternion norm".into(),
                });
            }
            for (k, v) in (q / norm).iter().enumerate() {
                chunk[6 + k] = *v;
            }
        }

        // PSNR of the clamped render for the log.
        let mut clamped = rendered.color.clone();
        for y in 0..clamped.height() {
            for x in 0..clamped.width() {
                for c in 0..3 {
                    let v = clamped.get(x, y, c).clamp(0.0, 1.0);
                    clamped.set(x, y, c, v);
                }
            }
        }
        let psnr_train = psnr(&clamped, &view.image).unwrap_or(f64::NAN);
        history.push(HistoryRecord {
            iteration,
            image_loss: img_out.value,
            depth_loss: depth_term,
            lambda_d,
            total_loss: total,
            psnr_train,
        });

        if let Some(threshold) = cfg.prune_opacity_below {
            if iteration % cfg.prune_interval == 0 {
                let keep: Vec<usize> = params
                    .chunks(PARAMS_PER_GAUSSIAN)
                    .enumerate()
                    .filter(|(_, chunk)| sigmoid(chunk[10]) >= threshold)
                    .map(|(i, _)| i)
                    .collect();
                if keep.is_empty() {
                    return Err(TrainError::AllPruned { iteration });
                }
                if keep.len() * PARAMS_PER_GAUSSIAN != params.len() {
                    let squash = |buf: &Vec<f64>| -> Vec<f64> {
                        keep.iter()
                            .flat_map(|&i| {
                                buf[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN]
                                    .iter()
                                    .copied()
                            })
                            .collect()
                    };
                    params = squash(&params);
                    adam_m = squash(&adam_m);
                    adam_v = squash(&adam_v);
                }
            }
        }

        if cfg.checkpoint_interval > 0 && iteration % cfg.checkpoint_interval == 0 {
            let current: Vec<GaussianPrimitive> = params
                .chunks(PARAMS_PER_GAUSSIAN)
                .map(GaussianPrimitive::from_params)
                .collect();
            snapshot(iteration, &current);
        }
    }

    Ok(TrainState {
        params,
        adam_m,
        adam_v,
        iteration: cfg.iterations,
        history,
    })
}
