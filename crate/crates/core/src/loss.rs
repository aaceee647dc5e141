//! Training objective: confidence-weighted L1 depth loss, an adaptive
//! global depth weight that decays with per-view alignment error, and an
//! L1 + D-SSIM image loss with analytic gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Raster;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Weights and SSIM parameters for the combined objective.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Depth-weight ceiling; 0 disables depth supervision entirely.
    pub lambda_max: f64,
    /// Decay rate of the depth weight in the per-view alignment loss.
    pub k: f64,
    /// D-SSIM share of the image loss (L1 gets 1 − lambda_dssim).
    pub lambda_dssim: f64,
    /// SSIM window side length (odd).
    pub ssim_window: usize,
    /// SSIM Gaussian window sigma.
    pub ssim_sigma: f64,
    /// SSIM luminance stabilizer (unit dynamic range).
    pub ssim_c1: f64,
    /// SSIM contrast stabilizer (unit dynamic range).
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.6,
            k: 150.0,
            lambda_dssim: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    /// `lambda_max` may be exactly 0 — that switches the objective to the
    /// image-only degenerate case used by the unsupervised baseline.
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            return Err(LossError::InvalidParameter(format!(
                "lambda_max must be >= 0, got {}",
                self.lambda_max
            )));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(LossError::InvalidParameter(format!(
                "k must be positive, got {}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(LossError::InvalidParameter(format!(
                "lambda_dssim must lie in [0,1], got {}",
                self.lambda_dssim
            )));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(LossError::InvalidParameter(format!(
                "ssim_window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.ssim_sigma > 0.0) || !(self.ssim_c1 > 0.0) || !(self.ssim_c2 > 0.0) {
            return Err(LossError::InvalidParameter(
                "ssim_sigma, ssim_c1, ssim_c2 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Confidence-weighted depth loss and its gradient.
#[derive(Clone, Debug)]
pub struct DepthLossOutput {
    pub value: f64,
    /// ∂value/∂rendered, zero outside the jointly valid pixel set.
    pub grad: Raster,
    /// True when no pixel was valid in all three inputs; the value is 0
    /// and the caller should skip the depth term this step.
    pub empty_domain: bool,
}

/// Mean confidence-weighted absolute depth error over the pixels valid in
/// all three rasters, with the (sub)gradient with respect to the rendered
/// depth (sign(0) = 0).
pub fn depth_loss(
    rendered: &Raster,
    estimated: &Raster,
    confidence: &Raster,
) -> Result<DepthLossOutput, LossError> {
    if !rendered.same_shape(estimated) || !rendered.same_shape(confidence) {
        return Err(LossError::DimensionMismatch(format!(
            "rendered {}x{}x{}, estimated {}x{}x{}, confidence {}x{}x{}",
            rendered.width(),
            rendered.height(),
            rendered.channels(),
            estimated.width(),
            estimated.height(),
            estimated.channels(),
            confidence.width(),
            confidence.height(),
            confidence.channels(),
        )));
    }
    if rendered.channels() != 1 {
        return Err(LossError::DimensionMismatch(
            "depth rasters must be single-channel".into(),
        ));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let mut grad = Raster::new(w, h, 1).expect("dims already valid");
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut signs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if rendered.is_valid(x, y) && estimated.is_valid(x, y) && confidence.is_valid(x, y) {
                let c = confidence.get(x, y, 0) as f64;
                let r = rendered.get(x, y, 0) as f64 - estimated.get(x, y, 0) as f64;
                sum += c * r.abs();
                signs.push((x, y, c * sign(r)));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(DepthLossOutput {
            value: 0.0,
            grad,
            empty_domain: true,
        });
    }
    let n = count as f64;
    for (x, y, s) in signs {
        grad.set(x, y, 0, (s / n) as f32);
    }
    Ok(DepthLossOutput {
        value: sum / n,
        grad,
        empty_domain: false,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Depth-supervision weight λ_d = λ_max · exp(−k · alignment_loss); decays
/// toward 0 as the per-view alignment fit worsens.
pub fn adaptive_weight(alignment_loss: f64, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    if !(alignment_loss >= 0.0) {
        return Err(LossError::InvalidParameter(format!(
            "alignment loss must be nonnegative, got {alignment_loss}"
        )));
    }
    Ok(cfg.lambda_max * (-cfg.k * alignment_loss).exp())
}

/// Combined objective L = image_term + λ_d · depth_term.
pub fn total_loss(image_term: f64, depth_term: f64, lambda_d: f64) -> f64 {
    image_term + lambda_d * depth_term
}

/// Image loss value with its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct ImageLossOutput {
    pub value: f64,
    pub grad: Raster,
}

/// Normalized Gaussian window, separable (outer product of this 1D kernel).
fn ssim_kernel(cfg: &LossConfig) -> Vec<f64> {
    let r = (cfg.ssim_window / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable windowed correlation evaluated wherever the window fits;
/// entries outside that interior are left 0.
fn window_corr(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in r..w - r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i - r];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in r..h - r {
        for x in r..w - r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i - r) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`window_corr`]: spreads per-center coefficients back onto
/// pixels (zero padding outside the center interior). With a symmetric
/// kernel this is again a correlation, now over the full pixel extent.
fn window_spread(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r;
                if sx >= 0 && sx < w as isize {
                    acc += kv * src[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && sy < h as isize {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_image_pair(pred: &Raster, gt: &Raster, cfg: &LossConfig) -> Result<(), LossError> {
    cfg.validate()?;
    if !pred.same_shape(gt) {
        return Err(LossError::DimensionMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.channels(),
            gt.width(),
            gt.height(),
            gt.channels(),
        )));
    }
    if pred.channels() != 3 {
        return Err(LossError::DimensionMismatch(
            "image losses expect 3-channel rasters".into(),
        ));
    }
    if pred.width() < cfg.ssim_window || pred.height() < cfg.ssim_window {
        return Err(LossError::DimensionMismatch(format!(
            "image {}x{} smaller than the {}-pixel SSIM window",
            pred.width(),
            pred.height(),
            cfg.ssim_window
        )));
    }
    Ok(())
}

struct ChannelStats {
    s_sum: f64,
    /// Per-center coefficient fields of the SSIM derivative: the gradient at
    /// pixel p is spread(c0) + x_p·spread(c1) + y_p·spread(c2).
    c0: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64], cfg: &LossConfig) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = window_corr(x, w, h, k);
    let my = window_corr(y, w, h, k);
    let mxx = window_corr(&xx, w, h, k);
    let myy = window_corr(&yy, w, h, k);
    let mxy = window_corr(&xy, w, h, k);
    let r = k.len() / 2;
    let mut s_sum = 0.0;
    let mut c0 = vec![0.0; w * h];
    let mut c1 = vec![0.0; w * h];
    let mut c2 = vec![0.0; w * h];
    for cy in r..h - r {
        for cx in r..w - r {
            let i = cy * w + cx;
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let vxy = mxy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + cfg.ssim_c1;
            let a2 = 2.0 * vxy + cfg.ssim_c2;
            let b1 = ux * ux + uy * uy + cfg.ssim_c1;
            let b2 = vx + vy + cfg.ssim_c2;
            let s = (a1 * a2) / (b1 * b2);
            s_sum += s;
            // ∂S through the window statistics (mean, variance, covariance).
            let ds_da1 = a2 / (b1 * b2);
            let ds_db1 = -s / b1;
            let ds_dvx = -s / b2;
            let ds_dvxy = 2.0 * a1 / (b1 * b2);
            let ds_dux = ds_da1 * 2.0 * uy + ds_db1 * 2.0 * ux;
            c0[i] = ds_dux - 2.0 * ux * ds_dvx - uy * ds_dvxy;
            c1[i] = 2.0 * ds_dvx;
            c2[i] = ds_dvxy;
        }
    }
    ChannelStats { s_sum, c0, c1, c2 }
}

fn channel_plane(img: &Raster, ch: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    (0..w * h)
        .map(|i| img.get(i % w, i / w, ch) as f64)
        .collect()
}

/// Mean SSIM between two 3-channel rasters: 11×11 Gaussian-window statistics
/// at every fully interior window position, per channel, averaged.
pub fn ssim(pred: &Raster, gt: &Raster, cfg: &LossConfig) -> Result<f64, LossError> {
    check_image_pair(pred, gt, cfg)?;
    let (w, h) = (pred.width(), pred.height());
    let k = ssim_kernel(cfg);
    let r = k.len() / 2;
    let n_pos = ((w - 2 * r) * (h - 2 * r)) as f64;
    let mut total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(pred, ch);
        let y = channel_plane(gt, ch);
        total += ssim_channel(&x, &y, w, h, &k, cfg).s_sum;
    }
    Ok(total / (3.0 * n_pos))
}

/// Image loss (1−λ)·mean|pred−gt| + λ·(1 − SSIM(pred, gt)) with the analytic
/// gradient with respect to `pred`.
pub fn image_loss(pred: &Raster, gt: &Raster, cfg: &LossConfig) -> Result<ImageLossOutput, LossError> {
    check_image_pair(pred, gt, cfg)?;
    let (w, h) = (pred.width(), pred.height());
    let k = ssim_kernel(cfg);
    let r = k.len() / 2;
    let n_pos = ((w - 2 * r) * (h - 2 * r)) as f64;
    let n_l1 = (3 * w * h) as f64;
    let lam = cfg.lambda_dssim;

    let mut l1_sum = 0.0;
    let mut grad = Raster::new(w, h, 3).expect("dims already valid");
    let mut ssim_total = 0.0;
    for ch in 0..3 {
        let x = channel_plane(pred, ch);
        let y = channel_plane(gt, ch);
        let stats = ssim_channel(&x, &y, w, h, &k, cfg);
        ssim_total += stats.s_sum;
        let g0 = window_spread(&stats.c0, w, h, &k);
        let g1 = window_spread(&stats.c1, w, h, &k);
        let g2 = window_spread(&stats.c2, w, h, &k);
        for py in 0..h {
            for px in 0..w {
                let i = py * w + px;
                let d = x[i] - y[i];
                l1_sum += d.abs();
                let ssim_grad = (g0[i] + x[i] * g1[i] + y[i] * g2[i]) / (3.0 * n_pos);
                let g = (1.0 - lam) * sign(d) / n_l1 - lam * ssim_grad;
                grad.set(px, py, ch, g as f32);
            }
        }
    }
    let value = (1.0 - lam) * l1_sum / n_l1 + lam * (1.0 - ssim_total / (3.0 * n_pos));
    Ok(ImageLossOutput { value, grad })
}
