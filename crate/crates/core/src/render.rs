//! Differentiable CPU splat renderer. Forward pass projects each 3D Gaussian
//! to an elliptical 2D footprint (first-order EWA approximation) and
//! alpha-blends color and depth front to back per pixel; the backward pass
//! is the exact analytic adjoint of that computation, down to the same
//! culling, clamping, and early-termination decisions.
//!
//! All blending math runs in f64; rasters quantize to f32 only at the output
//! boundary. Rows are rendered in parallel and gradient partials are reduced
//! in a fixed row order, so results are bitwise reproducible at any thread
//! count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{CameraModel, GaussianPrimitive, Raster};

/// Splats closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic dilation added to every projected covariance (px²).
pub const COV2D_DILATION: f64 = 0.3;
/// Effective per-pixel alpha is clamped to at most this.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Blending stops once transmittance drops below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Depth pixels with accumulated weight at or below this are invalid.
pub const COVERAGE_FLOOR: f64 = 1e-6;
/// Culling tests the 3σ footprint against the viewport.
const CULL_RADIUS_SIGMA: f64 = 3.0;
/// Per-pixel evaluation skips splats beyond this many σ from the pixel;
/// the neglected weight is ≤ exp(−32) ≈ 1.3e-14, far below gradient-check
/// tolerances, while culling itself stays at the 3σ rule above.
const EVAL_RADIUS_SIGMA: f64 = 8.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid parameter on Gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// A Gaussian after projection into one view.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    /// Footprint center in pixels.
    pub pixel_mean: Vector2<f64>,
    /// 2×2 footprint covariance in px², dilation included.
    pub cov2d: Matrix2<f64>,
    /// Camera-space depth d (world units), > near plane.
    pub depth: f64,
    /// Opacity α ∈ (0,1).
    pub opacity: f64,
    /// RGB color.
    pub color: Vector3<f64>,
}

/// Rendered view: blended color, normalized alpha-weighted depth, and the
/// per-pixel accumulated blend weight Σ αⱼTⱼ. Depth validity is exactly
/// {alpha_sum > coverage floor}.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Raster,
    pub depth: Raster,
    pub alpha_sum: Raster,
}

/// Double-precision forward buffers (row-major), before f32 quantization.
/// Used by the trainer's loss path and by finite-difference gradient checks,
/// which need the un-quantized function.
#[derive(Clone, Debug)]
pub struct RenderForward {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, 3·width·height.
    pub color: Vec<f64>,
    /// Normalized blended depth; 0 where invalid.
    pub depth: Vec<f64>,
    pub alpha_sum: Vec<f64>,
    pub depth_valid: Vec<bool>,
}

/// Gradients of a scalar loss with respect to one Gaussian's raw parameters
/// (same storage convention as [`GaussianPrimitive`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrads {
    pub fn zeros() -> Self {
        Self {
            center: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: Vector4::zeros(),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        }
    }

    /// Writes the gradient in the flat optimizer layout.
    pub fn write_flat(&self, out: &mut [f64]) {
        assert_eq!(out.len(), crate::geom::PARAMS_PER_GAUSSIAN);
        out[0..3].copy_from_slice(self.center.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(self.rotation.as_slice());
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(self.color.as_slice());
    }
}

/// Everything the backward pass needs about one live (non-culled) splat.
struct SplatChain {
    /// Index into the original Gaussian list.
    orig: usize,
    mean: Vector2<f64>,
    /// Inverse of cov2d.
    inv_cov: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
    /// Per-pixel evaluation box (EVAL_RADIUS_SIGMA · √λ_max around mean).
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    // Chain intermediates for the backward pass.
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    q_hat: Vector4<f64>,
    q_norm: f64,
}

fn validate_gaussian(g: &GaussianPrimitive, index: usize) -> Result<(), RenderError> {
    let finite = g.center.iter().all(|c| c.is_finite())
        && g.log_scale.iter().all(|c| c.is_finite())
        && g.rotation.iter().all(|c| c.is_finite())
        && g.opacity_logit.is_finite()
        && g.color.iter().all(|c| c.is_finite());
    if !finite {
        return Err(RenderError::InvalidGaussian {
            index,
            reason: "non-finite parameter".into(),
        });
    }
    if g.rotation.norm() < 1e-12 {
        return Err(RenderError::InvalidGaussian {
            index,
            reason: "zero-norm quaternion".into(),
        });
    }
    if !g.scale().iter().all(|s| s.is_finite()) {
        return Err(RenderError::InvalidGaussian {
            index,
            reason: "scale overflows on exponentiation".into(),
        });
    }
    Ok(())
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    half_trace + (half_trace * half_trace - det).max(0.0).sqrt()
}

fn project_chain(g: &GaussianPrimitive, cam: &CameraModel, orig: usize) -> Option<SplatChain> {
    let p_cam = cam.world_to_camera(&g.center);
    let z = p_cam[2];
    if z <= NEAR_PLANE {
        return None;
    }
    let (fx, fy, sk) = (cam.fx(), cam.fy(), cam.skew());
    let mean = Vector2::new(
        (fx * p_cam[0] + sk * p_cam[1]) / z + cam.cx(),
        fy * p_cam[1] / z + cam.cy(),
    );
    // First-order EWA: Jacobian of the pixel projection at the center.
    let jac = Matrix2x3::new(
        fx / z,
        sk / z,
        -(fx * p_cam[0] + sk * p_cam[1]) / (z * z),
        0.0,
        fy / z,
        -fy * p_cam[1] / (z * z),
    );
    let q_norm = g.rotation.norm();
    let q_hat = g.rotation / q_norm;
    let rot = crate::geom::rotation_from_quaternion(&q_hat);
    let scale = g.scale();
    let sigma_world = rot * Matrix3::from_diagonal(&scale.map(|s| s * s)) * rot.transpose();
    let w = cam.rotation();
    let sigma_cam = w * sigma_world * w.transpose();
    let cov2d = jac * sigma_cam * jac.transpose()
        + Matrix2::from_diagonal_element(COV2D_DILATION);
    let lambda_max = max_eigenvalue_2x2(&cov2d);
    let cull_r = CULL_RADIUS_SIGMA * lambda_max.sqrt();
    let (w_px, h_px) = (cam.width() as f64, cam.height() as f64);
    if mean[0] + cull_r < -0.5
        || mean[0] - cull_r > w_px - 0.5
        || mean[1] + cull_r < -0.5
        || mean[1] - cull_r > h_px - 0.5
    {
        return None;
    }
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    // SPD with eigenvalues ≥ the dilation floor, so det ≥ 0.09; guard anyway.
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let inv_cov = Matrix2::new(
        cov2d[(1, 1)] / det,
        -cov2d[(0, 1)] / det,
        -cov2d[(1, 0)] / det,
        cov2d[(0, 0)] / det,
    );
    let eval_r = EVAL_RADIUS_SIGMA * lambda_max.sqrt();
    Some(SplatChain {
        orig,
        mean,
        inv_cov,
        depth: z,
        opacity: g.opacity(),
        color: g.color,
        x_min: mean[0] - eval_r,
        x_max: mean[0] + eval_r,
        y_min: mean[1] - eval_r,
        y_max: mean[1] + eval_r,
        p_cam,
        jac,
        sigma_cam,
        rot,
        scale,
        q_hat,
        q_norm,
    })
}

/// Projects one Gaussian into a view; `None` means culled (behind the near
/// plane or 3σ footprint outside the viewport).
pub fn project_gaussian(g: &GaussianPrimitive, cam: &CameraModel) -> Option<ProjectedGaussian> {
    project_chain(g, cam, 0).map(|s| {
        let det = s.inv_cov[(0, 0)] * s.inv_cov[(1, 1)] - s.inv_cov[(0, 1)] * s.inv_cov[(1, 0)];
        let cov2d = Matrix2::new(
            s.inv_cov[(1, 1)] / det,
            -s.inv_cov[(0, 1)] / det,
            -s.inv_cov[(1, 0)] / det,
            s.inv_cov[(0, 0)] / det,
        );
        ProjectedGaussian {
            pixel_mean: s.mean,
            cov2d,
            depth: s.depth,
            opacity: s.opacity,
            color: s.color,
        }
    })
}

/// Projects, culls, and depth-sorts the whole Gaussian list (front to back,
/// ties broken by original index).
fn build_splats(
    gaussians: &[GaussianPrimitive],
    cam: &CameraModel,
) -> Result<Vec<SplatChain>, RenderError> {
    let mut splats = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        validate_gaussian(g, i)?;
        if let Some(chain) = project_chain(g, cam, i) {
            let ok = chain.mean.iter().all(|c| c.is_finite())
                && chain.inv_cov.iter().all(|c| c.is_finite());
            if !ok {
                return Err(RenderError::InvalidGaussian {
                    index: i,
                    reason: "projection produced non-finite values".into(),
                });
            }
            splats.push(chain);
        }
    }
    splats.sort_by(|a, b| {
        (a.depth, a.orig)
            .partial_cmp(&(b.depth, b.orig))
            .expect("depths are finite")
    });
    Ok(splats)
}

#[inline]
fn gaussian_weight(s: &SplatChain, px: f64, py: f64) -> f64 {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.inv_cov[(0, 0)] * dx * dx
        + 2.0 * s.inv_cov[(0, 1)] * dx * dy
        + s.inv_cov[(1, 1)] * dy * dy;
    (-0.5 * q).exp()
}

/// Double-precision forward render.
pub fn render_forward(
    gaussians: &[GaussianPrimitive],
    cam: &CameraModel,
) -> Result<RenderForward, RenderError> {
    let splats = build_splats(gaussians, cam)?;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let mut color = vec![0.0f64; 3 * w * h];
    let mut depth = vec![0.0f64; w * h];
    let mut alpha_sum = vec![0.0f64; w * h];
    let mut depth_valid = vec![false; w * h];

    color
        .par_chunks_mut(3 * w)
        .zip(depth.par_chunks_mut(w))
        .zip(alpha_sum.par_chunks_mut(w))
        .zip(depth_valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (((crow, drow), arow), vrow))| {
            let py = y as f64;
            for x in 0..w {
                let px = x as f64;
                let mut t = 1.0f64;
                let mut c = [0.0f64; 3];
                let mut depth_num = 0.0f64;
                let mut weight_sum = 0.0f64;
                for s in &splats {
                    if px < s.x_min || px > s.x_max || py < s.y_min || py > s.y_max {
                        continue;
                    }
                    let wgt = gaussian_weight(s, px, py);
                    let a = (s.opacity * wgt).min(ALPHA_CLAMP);
                    let u = a * t;
                    c[0] += s.color[0] * u;
                    c[1] += s.color[1] * u;
                    c[2] += s.color[2] * u;
                    depth_num += s.depth * u;
                    weight_sum += u;
                    t *= 1.0 - a;
                    if t < TRANSMITTANCE_FLOOR {
                        break;
                    }
                }
                crow[3 * x..3 * x + 3].copy_from_slice(&c);
                arow[x] = weight_sum;
                if weight_sum > COVERAGE_FLOOR {
                    drow[x] = depth_num / weight_sum;
                    vrow[x] = true;
                }
            }
        });

    Ok(RenderForward {
        width: w,
        height: h,
        color,
        depth,
        alpha_sum,
        depth_valid,
    })
}

impl RenderForward {
    /// Quantizes the f64 buffers into the public raster triple.
    pub fn to_output(&self) -> RenderOutput {
        let (w, h) = (self.width, self.height);
        let color = Raster::from_parts(
            w,
            h,
            3,
            self.color.iter().map(|&v| v as f32).collect(),
            vec![true; w * h],
        )
        .expect("consistent dims");
        let depth = Raster::from_parts(
            w,
            h,
            1,
            self.depth.iter().map(|&v| v as f32).collect(),
            self.depth_valid.clone(),
        )
        .expect("consistent dims");
        let alpha_sum = Raster::from_parts(
            w,
            h,
            1,
            self.alpha_sum.iter().map(|&v| v as f32).collect(),
            vec![true; w * h],
        )
        .expect("consistent dims");
        RenderOutput {
            color,
            depth,
            alpha_sum,
        }
    }
}

/// Renders color, depth, and accumulated alpha rasters for one view.
pub fn render(
    gaussians: &[GaussianPrimitive],
    cam: &CameraModel,
) -> Result<RenderOutput, RenderError> {
    Ok(render_forward(gaussians, cam)?.to_output())
}

/// Per-splat accumulator layout inside the backward row buffers.
const ACC_STRIDE: usize = 10;
const ACC_MEAN_X: usize = 0;
const ACC_MEAN_Y: usize = 1;
const ACC_COV_XX: usize = 2;
const ACC_COV_XY: usize = 3;
const ACC_COV_YY: usize = 4;
const ACC_COLOR: usize = 5; // 5,6,7
const ACC_OPACITY: usize = 8;
const ACC_DEPTH: usize = 9;

/// Analytic adjoint of [`render`]. `grad_color` holds ∂L/∂(color raster)
/// (3-channel) and `grad_depth` ∂L/∂(depth raster) (1-channel); `None` is an
/// all-zero depth cotangent and skips that branch entirely. Depth cotangents
/// only flow through pixels whose forward depth is valid. Returns one
/// gradient record per input Gaussian; culled Gaussians get zeros.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    cam: &CameraModel,
    grad_color: &Raster,
    grad_depth: Option<&Raster>,
) -> Result<Vec<GaussianGrads>, RenderError> {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    if grad_color.width() != w || grad_color.height() != h || grad_color.channels() != 3 {
        return Err(RenderError::DimensionMismatch(format!(
            "grad_color is {}x{}x{}, camera expects {}x{}x3",
            grad_color.width(),
            grad_color.height(),
            grad_color.channels(),
            w,
            h
        )));
    }
    if let Some(gd) = grad_depth {
        if gd.width() != w || gd.height() != h || gd.channels() != 1 {
            return Err(RenderError::DimensionMismatch(format!(
                "grad_depth is {}x{}x{}, camera expects {}x{}x1",
                gd.width(),
                gd.height(),
                gd.channels(),
                w,
                h
            )));
        }
    }
    let splats = build_splats(gaussians, cam)?;
    let n = splats.len();
    let mut grads = vec![GaussianGrads::zeros(); gaussians.len()];
    if n == 0 {
        return Ok(grads);
    }

    // Per-pixel accumulation, parallel over rows; partials are reduced in
    // row order afterwards so the sum is deterministic.
    let row_acc: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![0.0f64; ACC_STRIDE * n];
            // (splat index, weight, alpha, transmittance before this splat)
            let mut contribs: Vec<(u32, f64, f64, f64)> = Vec::with_capacity(n.min(64));
            let py = y as f64;
            for x in 0..w {
                let px = x as f64;
                let gc = [
                    grad_color.get(x, y, 0) as f64,
                    grad_color.get(x, y, 1) as f64,
                    grad_color.get(x, y, 2) as f64,
                ];
                let gd_raw = grad_depth.map_or(0.0, |r| r.get(x, y, 0) as f64);
                if gc == [0.0; 3] && gd_raw == 0.0 {
                    continue;
                }
                // Replay the forward blend with identical decisions.
                contribs.clear();
                let mut t = 1.0f64;
                let mut depth_num = 0.0f64;
                let mut weight_sum = 0.0f64;
                for (si, s) in splats.iter().enumerate() {
                    if px < s.x_min || px > s.x_max || py < s.y_min || py > s.y_max {
                        continue;
                    }
                    let wgt = gaussian_weight(s, px, py);
                    let a = (s.opacity * wgt).min(ALPHA_CLAMP);
                    contribs.push((si as u32, wgt, a, t));
                    depth_num += s.depth * a * t;
                    weight_sum += a * t;
                    t *= 1.0 - a;
                    if t < TRANSMITTANCE_FLOOR {
                        break;
                    }
                }
                if contribs.is_empty() {
                    continue;
                }
                let depth_ok = weight_sum > COVERAGE_FLOOR;
                let gd = if depth_ok { gd_raw } else { 0.0 };
                if gc == [0.0; 3] && gd == 0.0 {
                    continue;
                }
                let inv_s = if depth_ok { 1.0 / weight_sum } else { 0.0 };
                let d_pix = depth_num * inv_s;
                // Reverse sweep with suffix sums Σ_{k>j} of c·u, d·u, u.
                let mut sc = [0.0f64; 3];
                let mut sd = 0.0f64;
                let mut ss = 0.0f64;
                for &(si, wgt, a, tb) in contribs.iter().rev() {
                    let s = &splats[si as usize];
                    let u = a * tb;
                    let one_minus = 1.0 - a; // ≥ 0.01 by the alpha clamp
                    let base = si as usize * ACC_STRIDE;
                    acc[base + ACC_COLOR] += gc[0] * u;
                    acc[base + ACC_COLOR + 1] += gc[1] * u;
                    acc[base + ACC_COLOR + 2] += gc[2] * u;
                    let mut da = gc[0] * (s.color[0] * tb - sc[0] / one_minus)
                        + gc[1] * (s.color[1] * tb - sc[1] / one_minus)
                        + gc[2] * (s.color[2] * tb - sc[2] / one_minus);
                    if gd != 0.0 {
                        acc[base + ACC_DEPTH] += gd * u * inv_s;
                        da += gd
                            * inv_s
                            * ((s.depth * tb - sd / one_minus) - d_pix * (tb - ss / one_minus));
                    }
                    if a < ALPHA_CLAMP {
                        // Unclamped: alpha depends on opacity and footprint.
                        acc[base + ACC_OPACITY] += da * wgt;
                        let dw = da * s.opacity;
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        let lx = s.inv_cov[(0, 0)] * dx + s.inv_cov[(0, 1)] * dy;
                        let ly = s.inv_cov[(0, 1)] * dx + s.inv_cov[(1, 1)] * dy;
                        let cw = dw * wgt;
                        acc[base + ACC_MEAN_X] += cw * lx;
                        acc[base + ACC_MEAN_Y] += cw * ly;
                        acc[base + ACC_COV_XX] += 0.5 * cw * lx * lx;
                        acc[base + ACC_COV_XY] += 0.5 * cw * lx * ly;
                        acc[base + ACC_COV_YY] += 0.5 * cw * ly * ly;
                    }
                    sc[0] += s.color[0] * u;
                    sc[1] += s.color[1] * u;
                    sc[2] += s.color[2] * u;
                    sd += s.depth * u;
                    ss += u;
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![0.0f64; ACC_STRIDE * n];
    for row in &row_acc {
        for (a, r) in acc.iter_mut().zip(row.iter()) {
            *a += r;
        }
    }

    // Chain per-splat screen-space gradients back to the raw parameters.
    let (fx, fy, sk) = (cam.fx(), cam.fy(), cam.skew());
    let w_mat = cam.rotation();
    for (si, s) in splats.iter().enumerate() {
        let base = si * ACC_STRIDE;
        let g_mean = Vector2::new(acc[base + ACC_MEAN_X], acc[base + ACC_MEAN_Y]);
        let g_cov = Matrix2::new(
            acc[base + ACC_COV_XX],
            acc[base + ACC_COV_XY],
            acc[base + ACC_COV_XY],
            acc[base + ACC_COV_YY],
        );
        // Pixel mean is the projection of p_cam, so its Jacobian is `jac`.
        let mut d_pcam = s.jac.transpose() * g_mean;
        d_pcam[2] += acc[base + ACC_DEPTH];
        // cov2d = J Σ_cam Jᵀ + const.
        let d_sigma_cam = s.jac.transpose() * g_cov * s.jac;
        let d_jac = 2.0 * g_cov * s.jac * s.sigma_cam;
        // ∂J/∂p_cam, entrywise (J01/J11 only via z; J02/J12 via all three).
        let z = s.p_cam[2];
        let (z2, z3) = (z * z, z * z * z);
        let (pcx, pcy) = (s.p_cam[0], s.p_cam[1]);
        d_pcam[0] += d_jac[(0, 2)] * (-fx / z2);
        d_pcam[1] += d_jac[(0, 2)] * (-sk / z2) + d_jac[(1, 2)] * (-fy / z2);
        d_pcam[2] += d_jac[(0, 0)] * (-fx / z2)
            + d_jac[(0, 1)] * (-sk / z2)
            + d_jac[(0, 2)] * (2.0 * (fx * pcx + sk * pcy) / z3)
            + d_jac[(1, 1)] * (-fy / z2)
            + d_jac[(1, 2)] * (2.0 * fy * pcy / z3);
        // p_cam = W μ + T and Σ_cam = W Σ Wᵀ.
        let d_center = w_mat.transpose() * d_pcam;
        let d_sigma = w_mat.transpose() * d_sigma_cam * w_mat;
        // Σ = A Aᵀ with A = M diag(s); d_sigma is symmetric by construction.
        let a_mat = s.rot * Matrix3::from_diagonal(&s.scale);
        let d_a = 2.0 * d_sigma * a_mat;
        let mut d_log_scale = Vector3::zeros();
        for k in 0..3 {
            let ds_k = s.rot.column(k).dot(&d_a.column(k));
            d_log_scale[k] = ds_k * s.scale[k];
        }
        let mut d_m = Matrix3::zeros();
        for r in 0..3 {
            for k in 0..3 {
                d_m[(r, k)] = d_a[(r, k)] * s.scale[k];
            }
        }
        let d_q_hat = quaternion_backward(&s.q_hat, &d_m);
        // Through the normalization q̂ = q/‖q‖.
        let d_q = (d_q_hat - s.q_hat * s.q_hat.dot(&d_q_hat)) / s.q_norm;
        let o = s.opacity;
        grads[s.orig] = GaussianGrads {
            center: d_center,
            log_scale: d_log_scale,
            rotation: d_q,
            opacity_logit: acc[base + ACC_OPACITY] * o * (1.0 - o),
            color: Vector3::new(
                acc[base + ACC_COLOR],
                acc[base + ACC_COLOR + 1],
                acc[base + ACC_COLOR + 2],
            ),
        };
    }
    Ok(grads)
}

/// dL/dq̂ given dL/dM for the unit quaternion q̂ = (w,x,y,z) and its rotation
/// matrix M — the standard entrywise partials of M(q̂).
fn quaternion_backward(q_hat: &Vector4<f64>, dm: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q_hat[0], q_hat[1], q_hat[2], q_hat[3]);
    let dw = 2.0
        * (-z * dm[(0, 1)] + y * dm[(0, 2)] + z * dm[(1, 0)] - x * dm[(1, 2)] - y * dm[(2, 0)]
            + x * dm[(2, 1)]);
    let dx = 2.0
        * (y * dm[(0, 1)] + z * dm[(0, 2)] + y * dm[(1, 0)] - 2.0 * x * dm[(1, 1)]
            - w * dm[(1, 2)]
            + z * dm[(2, 0)]
            + w * dm[(2, 1)]
            - 2.0 * x * dm[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * dm[(0, 0)] + x * dm[(0, 1)] + w * dm[(0, 2)] + x * dm[(1, 0)]
            + z * dm[(1, 2)]
            - w * dm[(2, 0)]
            + z * dm[(2, 1)]
            - 2.0 * y * dm[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * dm[(0, 0)] - w * dm[(0, 1)] + x * dm[(0, 2)] + w * dm[(1, 0)]
            - 2.0 * z * dm[(1, 1)]
            + y * dm[(1, 2)]
            + x * dm[(2, 0)]
            + y * dm[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}
