//! Core domain types shared by every stage: Gaussian primitives, pinhole
//! cameras, rasters with validity masks, sparse point sets, and the
//! elementary projections between them.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Flat parameter count per Gaussian: 3 center + 3 log-scale + 4 quaternion
/// + 1 opacity logit + 3 color.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian. Constrained quantities are stored in an
/// unconstrained parameterization so the optimizer can take free steps:
/// scales as logs (exponentiated on read), opacity as a logit (squashed on
/// read), rotation as a raw quaternion that is normalized on read and
/// re-normalized after every optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    /// World-space center μ.
    pub center: Vector3<f64>,
    /// Per-axis log of the standard deviation s.
    pub log_scale: Vector3<f64>,
    /// Quaternion (w, x, y, z); need not be exactly unit, normalized on use.
    pub rotation: Vector4<f64>,
    /// Pre-sigmoid opacity.
    pub opacity_logit: f64,
    /// RGB color, degree-0 (view-independent).
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    /// Builds a primitive from user-facing values: `scale` componentwise
    /// positive, `opacity` in [0,1] (clamped to (0,1) before the logit so the
    /// internal storage stays finite), `rotation` any nonzero quaternion.
    pub fn new(
        center: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Vector4<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        for v in [&center, &scale, &color] {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(GeomError::InvalidParameter("non-finite field".into()));
            }
        }
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(GeomError::InvalidParameter(format!(
                "scale must be strictly positive, got {:?}",
                scale
            )));
        }
        if !rotation.iter().all(|c| c.is_finite()) || rotation.norm() < 1e-12 {
            return Err(GeomError::InvalidParameter(
                "rotation quaternion must be finite and nonzero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&opacity) || !opacity.is_finite() {
            return Err(GeomError::InvalidParameter(format!(
                "opacity must lie in [0,1], got {opacity}"
            )));
        }
        let o = opacity.clamp(1e-9, 1.0 - 1e-9);
        Ok(Self {
            center,
            log_scale: scale.map(f64::ln),
            rotation: rotation.normalize(),
            opacity_logit: logit(o),
            color,
        })
    }

    /// Standard deviations, componentwise exp of the stored log-scales.
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Opacity α ∈ (0,1), sigmoid of the stored logit.
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Rotation matrix of the (normalized) stored quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_quaternion(&self.rotation)
    }

    /// Writes the 14 raw parameters into `out` in storage order.
    pub fn write_params(&self, out: &mut [f64]) {
        assert_eq!(out.len(), PARAMS_PER_GAUSSIAN);
        out[0..3].copy_from_slice(self.center.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(self.rotation.as_slice());
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(self.color.as_slice());
    }

    /// Rebuilds a primitive from 14 raw parameters in storage order.
    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), PARAMS_PER_GAUSSIAN);
        Self {
            center: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: Vector4::new(p[6], p[7], p[8], p[9]),
            opacity_logit: p[10],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }
}

/// Packs a Gaussian list into one flat parameter vector (optimizer layout).
pub fn pack_gaussians(gaussians: &[GaussianPrimitive]) -> Vec<f64> {
    let mut params = vec![0.0; gaussians.len() * PARAMS_PER_GAUSSIAN];
    for (g, chunk) in gaussians.iter().zip(params.chunks_mut(PARAMS_PER_GAUSSIAN)) {
        g.write_params(chunk);
    }
    params
}

/// Inverse of [`pack_gaussians`]; errors when the length is not a multiple
/// of the per-Gaussian parameter count.
pub fn unpack_gaussians(params: &[f64]) -> Result<Vec<GaussianPrimitive>, GeomError> {
    if params.len() % PARAMS_PER_GAUSSIAN != 0 {
        return Err(GeomError::DimensionMismatch(format!(
            "parameter vector length {} is not a multiple of {}",
            params.len(),
            PARAMS_PER_GAUSSIAN
        )));
    }
    Ok(params
        .chunks(PARAMS_PER_GAUSSIAN)
        .map(GaussianPrimitive::from_params)
        .collect())
}

/// Rotation matrix of quaternion `q` = (w, x, y, z); `q` is normalized first.
pub fn rotation_from_quaternion(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance Σ = M diag(s)² Mᵀ of a Gaussian with standard
/// deviations `scale` and orientation `rotation` (quaternion, normalized
/// internally). Symmetric positive-definite with eigenvalues in
/// [min(s)², max(s)²].
pub fn covariance_from_scale_rotation(
    scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
) -> Result<Matrix3<f64>, GeomError> {
    if !scale.iter().all(|c| c.is_finite()) || !rotation.iter().all(|c| c.is_finite()) {
        return Err(GeomError::InvalidParameter(
            "non-finite scale or rotation".into(),
        ));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(GeomError::InvalidParameter(
            "scale must be strictly positive".into(),
        ));
    }
    if rotation.norm() < 1e-12 {
        return Err(GeomError::InvalidParameter("zero quaternion".into()));
    }
    let m = rotation_from_quaternion(rotation);
    let s2 = Matrix3::from_diagonal(&scale.map(|s| s * s));
    Ok(m * s2 * m.transpose())
}

/// Pinhole camera: `p_cam = R·p_world + T`, pixels via the intrinsic matrix
/// K with the z-forward / y-down / x-right convention. Pixel centers sit on
/// integer coordinates: pixel (row r, col c) samples the image plane at
/// (x=c, y=r).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidParameter(
                "image dimensions must be positive".into(),
            ));
        }
        if !intrinsics.iter().all(|c| c.is_finite())
            || !rotation.iter().all(|c| c.is_finite())
            || !translation.iter().all(|c| c.is_finite())
        {
            return Err(GeomError::InvalidParameter("non-finite camera field".into()));
        }
        let lower = [intrinsics[(1, 0)], intrinsics[(2, 0)], intrinsics[(2, 1)]];
        if lower.iter().any(|&v| v != 0.0) {
            return Err(GeomError::InvalidParameter(
                "intrinsics must be upper-triangular".into(),
            ));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(GeomError::InvalidParameter(
                "focal entries must be positive".into(),
            ));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeomError::InvalidParameter(
                "intrinsics[2][2] must equal 1".into(),
            ));
        }
        let ortho = rotation.transpose() * rotation - Matrix3::identity();
        if ortho.iter().any(|v| v.abs() >= 1e-9) {
            return Err(GeomError::InvalidParameter(
                "rotation must be orthonormal".into(),
            ));
        }
        if rotation.determinant() <= 0.0 {
            return Err(GeomError::InvalidParameter(
                "rotation must be proper (det +1)".into(),
            ));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target` with `up` fixing the roll;
    /// image y points opposite `up` (y-down convention).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeomError::InvalidParameter("eye equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeomError::InvalidParameter("view direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Self::new(intrinsics, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }
}

/// Projects a world point: returns the pixel position and the camera-space
/// depth `(R·P + T)_z`. Depth may be negative (behind the camera) — callers
/// filter on sign. Returns `None` only when |depth| < 1e-12 and the
/// perspective division is degenerate.
pub fn project_point(cam: &CameraModel, point: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let p = cam.world_to_camera(point);
    let z = p[2];
    if z.abs() < 1e-12 {
        return None;
    }
    let px = (cam.fx() * p[0] + cam.skew() * p[1]) / z + cam.cx();
    let py = cam.fy() * p[1] / z + cam.cy();
    Some((Vector2::new(px, py), z))
}

/// Sparse SfM-style point set with optional per-point reprojection errors
/// (pixels, nonnegative, same length as `points`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePointSet {
    pub points: Vec<Vector3<f64>>,
    pub reproj_error: Option<Vec<f64>>,
}

impl SparsePointSet {
    pub fn new(
        points: Vec<Vector3<f64>>,
        reproj_error: Option<Vec<f64>>,
    ) -> Result<Self, GeomError> {
        if let Some(errs) = &reproj_error {
            if errs.len() != points.len() {
                return Err(GeomError::DimensionMismatch(format!(
                    "{} points but {} reprojection errors",
                    points.len(),
                    errs.len()
                )));
            }
            if errs.iter().any(|&e| !e.is_finite() || e < 0.0) {
                return Err(GeomError::InvalidParameter(
                    "reprojection errors must be finite and nonnegative".into(),
                ));
            }
        }
        if points
            .iter()
            .any(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(GeomError::InvalidParameter("non-finite point".into()));
        }
        Ok(Self {
            points,
            reproj_error,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Weight w = 1/(1 + reprojection error) for point `i`; 1 when errors
    /// are absent.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.reproj_error {
            Some(errs) => 1.0 / (1.0 + errs[i]),
            None => 1.0,
        }
    }
}

/// Row-major image/depth buffer of 32-bit values with a per-pixel validity
/// mask. Invalid pixels always carry the value 0 in every channel and are
/// excluded from reductions downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl Raster {
    /// All-valid raster of zeros. `channels` must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidParameter(
                "raster dimensions must be positive".into(),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(GeomError::InvalidParameter(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            valid: vec![true; width * height],
        })
    }

    /// All-valid raster filled with `value`.
    pub fn constant(
        width: usize,
        height: usize,
        channels: usize,
        value: f32,
    ) -> Result<Self, GeomError> {
        let mut r = Self::new(width, height, channels)?;
        r.data.fill(value);
        Ok(r)
    }

    /// Builds a raster from raw storage. Lengths must match; data at invalid
    /// pixels is zeroed to keep the invariant that invalid pixels carry 0.
    pub fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, GeomError> {
        let mut r = Self::new(width, height, channels)?;
        if data.len() != r.data.len() || valid.len() != r.valid.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "expected {} data / {} mask entries, got {} / {}",
                r.data.len(),
                r.valid.len(),
                data.len(),
                valid.len()
            )));
        }
        r.data = data;
        r.valid = valid;
        for i in 0..r.valid.len() {
            if !r.valid[i] {
                r.data[i * channels..(i + 1) * channels].fill(0.0);
            }
        }
        Ok(r)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.data[self.pixel_index(x, y) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, channel: usize, value: f32) {
        let i = self.pixel_index(x, y) * self.channels + channel;
        self.data[i] = value;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.pixel_index(x, y)]
    }

    /// Marks a pixel (in)valid; invalidating zeroes its channels.
    pub fn set_valid(&mut self, x: usize, y: usize, valid: bool) {
        let i = self.pixel_index(x, y);
        self.valid[i] = valid;
        if !valid {
            self.data[i * self.channels..(i + 1) * self.channels].fill(0.0);
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same shape and mask, all data zeroed.
    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: vec![0.0; self.data.len()],
            valid: self.valid.clone(),
        }
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }

    /// Luma view: 1-channel rasters pass through, 3-channel rasters are
    /// reduced by the BT.601 weights 0.299/0.587/0.114.
    pub fn to_luma(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::new(self.width, self.height, 1).expect("valid dims");
        out.valid.copy_from_slice(&self.valid);
        for i in 0..self.width * self.height {
            if out.valid[i] {
                let r = self.data[i * 3] as f64;
                let g = self.data[i * 3 + 1] as f64;
                let b = self.data[i * 3 + 2] as f64;
                out.data[i] = (0.299 * r + 0.587 * g + 0.114 * b) as f32;
            }
        }
        out
    }
}
