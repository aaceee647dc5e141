//! Per-pixel confidence maps fusing three cues: distance from image edges
//! (Canny), local texture strength (Laplacian magnitude), and depth
//! smoothness (inverse gradient magnitude). Training uses the fused map to
//! down-weight depth supervision where the aligned depth is unreliable.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Raster;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("image must be at least 3x3, got {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valid pixels in depth map")]
    EmptyMap,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Cue weights and detector thresholds for the fused confidence map.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceConfig {
    /// Weight of the edge cue.
    pub w_e: f64,
    /// Weight of the texture cue.
    pub w_t: f64,
    /// Weight of the depth-gradient cue.
    pub w_g: f64,
    /// Stabilizer added to the depth-gradient magnitude.
    pub epsilon: f64,
    /// Canny hysteresis low threshold on the 8-bit luma scale.
    pub canny_low: f64,
    /// Canny hysteresis high threshold on the 8-bit luma scale.
    pub canny_high: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            w_e: 0.2,
            w_t: 0.5,
            w_g: 0.3,
            epsilon: 1e-6,
            canny_low: 50.0,
            canny_high: 150.0,
        }
    }
}

impl ConfidenceConfig {
    /// Weights must be a convex combination (sum 1, each in [0,1]) with the
    /// texture cue dominant: w_t > w_g > w_e.
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        let sum = self.w_e + self.w_t + self.w_g;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfidenceError::InvalidConfig(format!(
                "cue weights must sum to 1, got {sum}"
            )));
        }
        for (name, w) in [("w_e", self.w_e), ("w_t", self.w_t), ("w_g", self.w_g)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(ConfidenceError::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {w}"
                )));
            }
        }
        if !(self.w_t > self.w_g && self.w_g > self.w_e) {
            return Err(ConfidenceError::InvalidConfig(format!(
                "cue weights must satisfy w_t > w_g > w_e, got {} / {} / {}",
                self.w_t, self.w_g, self.w_e
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ConfidenceError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.canny_low > 0.0) || !(self.canny_high > self.canny_low) {
            return Err(ConfidenceError::InvalidConfig(format!(
                "need 0 < canny_low < canny_high, got {} / {}",
                self.canny_low, self.canny_high
            )));
        }
        Ok(())
    }
}

const BLUR_SIGMA: f64 = 1.4;
const BLUR_RADIUS: usize = 5;

fn luma_f64(image: &Raster) -> Result<Vec<f64>, ConfidenceError> {
    if image.width() < 3 || image.height() < 3 {
        return Err(ConfidenceError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
        });
    }
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = if image.channels() == 1 {
                image.get(x, y, 0) as f64
            } else {
                0.299 * image.get(x, y, 0) as f64
                    + 0.587 * image.get(x, y, 1) as f64
                    + 0.114 * image.get(x, y, 2) as f64
            };
        }
    }
    Ok(out)
}

fn gaussian_kernel() -> [f64; 2 * BLUR_RADIUS + 1] {
    let mut k = [0.0; 2 * BLUR_RADIUS + 1];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - BLUR_RADIUS as f64;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicate borders.
fn blur_replicate(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = BLUR_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * img[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// 3x3 Sobel gradients with replicate borders; returns (gx, gy).
fn sobel_replicate(img: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        img[cy * w + cx]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (a, b, c) = (at(x - 1, y - 1), at(x, y - 1), at(x + 1, y - 1));
            let (d, f) = (at(x - 1, y), at(x + 1, y));
            let (g, hh, i) = (at(x - 1, y + 1), at(x, y + 1), at(x + 1, y + 1));
            gx[y as usize * w + x as usize] = (c + 2.0 * f + i) - (a + 2.0 * d + g);
            gy[y as usize * w + x as usize] = (g + 2.0 * hh + i) - (a + 2.0 * b + c);
        }
    }
    (gx, gy)
}

/// Canny edge map over a continuous 8-bit-scale luma grid: blur, Sobel,
/// non-maximum suppression along the quantized gradient direction (interior
/// pixels only), then two-threshold hysteresis grown through 8-connected
/// neighbors. Returns a boolean edge mask.
fn canny(luma255: &[f64], w: usize, h: usize, low: f64, high: f64) -> Vec<bool> {
    let blurred = blur_replicate(luma255, w, h);
    let (gx, gy) = sobel_replicate(&blurred, w, h);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();

    // Non-maximum suppression: keep pixels whose magnitude is >= both
    // neighbors along the gradient direction, quantized to 4 bins.
    let mut keep = vec![false; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]);
            if angle < 0.0 {
                angle += std::f64::consts::PI;
            }
            let octant = (angle / (std::f64::consts::PI / 4.0)).round() as usize % 4;
            let (dx, dy): (isize, isize) = match octant {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let n1 = mag[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let n2 = mag[(y as isize - dy) as usize * w + (x as isize - dx) as usize];
            keep[i] = mag[i] >= n1 && mag[i] >= n2;
        }
    }

    // Hysteresis: strong seeds, weak pixels join via 8-connectivity.
    let mut edge = vec![false; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if keep[i] && mag[i] >= high {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && keep[j] && mag[j] >= low {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edge
}

/// Edge cue: 1 everywhere except on detected edge pixels, where it is 0.
/// Output is binary. Validity follows the input image.
pub fn edge_confidence(
    image: &Raster,
    cfg: &ConfidenceConfig,
) -> Result<Raster, ConfidenceError> {
    cfg.validate()?;
    let luma = luma_f64(image)?;
    let (w, h) = (image.width(), image.height());
    let luma255: Vec<f64> = luma.iter().map(|&v| v * 255.0).collect();
    let edge = canny(&luma255, w, h, cfg.canny_low, cfg.canny_high);
    let mut out = Raster::new(w, h, 1).expect("validated dims");
    for y in 0..h {
        for x in 0..w {
            if image.is_valid(x, y) {
                out.set(x, y, 0, if edge[y * w + x] { 0.0 } else { 1.0 });
            } else {
                out.set_valid(x, y, false);
            }
        }
    }
    Ok(out)
}

/// Texture cue: 1 − |∇²I| / max|∇²I| with the 5-point Laplacian on luma and
/// replicate borders; a zero-response image maps to all ones.
pub fn texture_confidence(image: &Raster) -> Result<Raster, ConfidenceError> {
    let luma = luma_f64(image)?;
    let (w, h) = (image.width(), image.height());
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        luma[cy * w + cx]
    };
    let mut lap = vec![0.0; w * h];
    let mut max_abs = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            let a = v.abs();
            lap[y as usize * w + x as usize] = a;
            max_abs = max_abs.max(a);
        }
    }
    let mut out = Raster::new(w, h, 1).expect("validated dims");
    for y in 0..h {
        for x in 0..w {
            if image.is_valid(x, y) {
                let c = if max_abs == 0.0 {
                    1.0
                } else {
                    1.0 - lap[y * w + x] / max_abs
                };
                out.set(x, y, 0, c as f32);
            } else {
                out.set_valid(x, y, false);
            }
        }
    }
    Ok(out)
}

/// Depth-smoothness cue: 1/(|∇D| + ε) normalized by its maximum over valid
/// pixels. Gradients are central differences, falling back to one-sided
/// differences at image borders and next to invalid pixels (so a uniform
/// ramp yields a uniform gradient, which normalizes to 1 everywhere).
/// Invalid pixels get confidence 0.
pub fn gradient_confidence(depth: &Raster, epsilon: f64) -> Result<Raster, ConfidenceError> {
    if depth.channels() != 1 {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "depth must be single-channel, got {} channels",
            depth.channels()
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ConfidenceError::InvalidConfig(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    let (w, h) = (depth.width(), depth.height());
    if depth.valid_count() == 0 {
        return Err(ConfidenceError::EmptyMap);
    }
    // One axis of the gradient: difference between the nearest valid
    // neighbors on either side (central when both exist, one-sided when one
    // is missing, zero when isolated), divided by their pixel distance.
    let diff = |center: f64,
                minus: Option<f64>,
                plus: Option<f64>| match (minus, plus) {
        (Some(a), Some(b)) => (b - a) / 2.0,
        (Some(a), None) => center - a,
        (None, Some(b)) => b - center,
        (None, None) => 0.0,
    };
    let sample = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return None;
        }
        let (x, y) = (x as usize, y as usize);
        depth.is_valid(x, y).then(|| depth.get(x, y, 0) as f64)
    };
    let mut raw = vec![0.0; w * h];
    let mut max_raw = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(x, y) {
                continue;
            }
            let c = depth.get(x, y, 0) as f64;
            let (xi, yi) = (x as isize, y as isize);
            let dx = diff(c, sample(xi - 1, yi), sample(xi + 1, yi));
            let dy = diff(c, sample(xi, yi - 1), sample(xi, yi + 1));
            let v = 1.0 / ((dx * dx + dy * dy).sqrt() + epsilon);
            raw[y * w + x] = v;
            max_raw = max_raw.max(v);
        }
    }
    let mut out = Raster::new(w, h, 1).expect("validated dims");
    for y in 0..h {
        for x in 0..w {
            if depth.is_valid(x, y) {
                out.set(x, y, 0, (raw[y * w + x] / max_raw) as f32);
            } else {
                out.set_valid(x, y, false);
            }
        }
    }
    Ok(out)
}

/// Weighted fusion of the three cues, clamped to [0,1]; valid where all
/// inputs are valid.
pub fn fuse_confidence(
    c_e: &Raster,
    c_t: &Raster,
    c_g: &Raster,
    cfg: &ConfidenceConfig,
) -> Result<Raster, ConfidenceError> {
    cfg.validate()?;
    if !c_e.same_shape(c_t) || !c_e.same_shape(c_g) || c_e.channels() != 1 {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "cue rasters disagree: {}x{}x{}, {}x{}x{}, {}x{}x{}",
            c_e.width(),
            c_e.height(),
            c_e.channels(),
            c_t.width(),
            c_t.height(),
            c_t.channels(),
            c_g.width(),
            c_g.height(),
            c_g.channels(),
        )));
    }
    let (w, h) = (c_e.width(), c_e.height());
    let mut out = Raster::new(w, h, 1).expect("validated dims");
    for y in 0..h {
        for x in 0..w {
            if c_e.is_valid(x, y) && c_t.is_valid(x, y) && c_g.is_valid(x, y) {
                let v = cfg.w_e * c_e.get(x, y, 0) as f64
                    + cfg.w_t * c_t.get(x, y, 0) as f64
                    + cfg.w_g * c_g.get(x, y, 0) as f64;
                out.set(x, y, 0, v.clamp(0.0, 1.0) as f32);
            } else {
                out.set_valid(x, y, false);
            }
        }
    }
    Ok(out)
}

/// Convenience composition: all three cues from an image/depth pair, fused.
pub fn confidence_map(
    image: &Raster,
    depth: &Raster,
    cfg: &ConfidenceConfig,
) -> Result<Raster, ConfidenceError> {
    if image.width() != depth.width() || image.height() != depth.height() {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "image {}x{} vs depth {}x{}",
            image.width(),
            image.height(),
            depth.width(),
            depth.height()
        )));
    }
    let c_e = edge_confidence(image, cfg)?;
    let c_t = texture_confidence(image)?;
    let c_g = gradient_confidence(depth, cfg.epsilon)?;
    fuse_confidence(&c_e, &c_t, &c_g, cfg)
}
