//! Reconstruction metrics: PSNR for images, precision/recall/F-score for
//! point clouds at a distance threshold, and M3C2 signed plane-to-plane
//! distances with an RMSE summary.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{GaussianPrimitive, Raster};
use crate::spatial::KdTree3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A bag of 3D points in world units, optionally with unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self, EvalError> {
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(EvalError::DimensionMismatch(format!(
                    "{} points but {} normals",
                    points.len(),
                    ns.len()
                )));
            }
            for (i, n) in ns.iter().enumerate() {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(EvalError::InvalidParameter(format!(
                        "normal {i} has norm {}, expected 1",
                        n.norm()
                    )));
                }
            }
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rigid (or rotation-like) transform p → M·p + t applied to every
    /// point; normals are rotated and renormalized.
    pub fn transformed(&self, m: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| m * p + t).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| (m * n).normalize()).collect()),
        }
    }

    /// Diagonal length of the axis-aligned bounding box (0 for < 2 points).
    pub fn bounding_diagonal(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (hi - lo).norm()
    }
}

/// Centers of the Gaussians whose opacity exceeds `alpha_threshold` — the
/// point-cloud view of a trained scene used by the geometric metrics.
pub fn extract_point_cloud(gaussians: &[GaussianPrimitive], alpha_threshold: f64) -> PointCloud {
    PointCloud {
        points: gaussians
            .iter()
            .filter(|g| g.opacity() > alpha_threshold)
            .map(|g| g.center)
            .collect(),
        normals: None,
    }
}

/// Peak signal-to-noise ratio in dB for unit-range rasters, over pixels
/// valid in both inputs. Identical inputs give +∞.
pub fn psnr(pred: &Raster, gt: &Raster) -> Result<f64, EvalError> {
    if !pred.same_shape(gt) {
        return Err(EvalError::DimensionMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.channels(),
            gt.width(),
            gt.height(),
            gt.channels(),
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if pred.is_valid(x, y) && gt.is_valid(x, y) {
                for c in 0..pred.channels() {
                    let d = pred.get(x, y, c) as f64 - gt.get(x, y, c) as f64;
                    sum += d * d;
                }
                count += pred.channels();
            }
        }
    }
    if count == 0 {
        return Err(EvalError::UndefinedMetric(
            "no jointly valid pixels for PSNR".into(),
        ));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Precision/recall/F-score at a distance threshold.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeometricReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore_percent: f64,
}

/// Fraction of `reconstructed` points strictly within `threshold` of
/// `truth` (precision), the symmetric completeness fraction (recall), and
/// the F-score 200·P·R/(P+R) in percent.
pub fn fscore(
    reconstructed: &PointCloud,
    truth: &PointCloud,
    threshold: f64,
) -> Result<GeometricReport, EvalError> {
    if reconstructed.is_empty() || truth.is_empty() {
        return Err(EvalError::UndefinedMetric(
            "fscore needs two nonempty clouds".into(),
        ));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(EvalError::InvalidParameter(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let fraction_within = |from: &PointCloud, to: &PointCloud| -> f64 {
        let tree = KdTree3::build(&to.points);
        let hits = from
            .points
            .iter()
            .filter(|p| tree.nearest(p).is_some_and(|(_, d)| d < threshold))
            .count();
        hits as f64 / from.len() as f64
    };
    let precision = fraction_within(reconstructed, truth);
    let recall = fraction_within(truth, reconstructed);
    let fscore_percent = if precision + recall > 0.0 {
        200.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeometricReport {
        threshold,
        precision,
        recall,
        fscore_percent,
    })
}

/// Neighborhood scales for [`m3c2`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct M3c2Params {
    /// Plane-fit neighborhood diameter D; normals come from reference
    /// points within D/2 of each core point.
    pub normal_scale: f64,
    /// Projection cylinder radius.
    pub cylinder_radius: f64,
    /// Half-length of the projection cylinder along the normal.
    pub max_depth: f64,
    /// Every k-th reference point becomes a core point.
    #[serde(default = "default_core_stride")]
    pub core_stride: usize,
}

fn default_core_stride() -> usize {
    1
}

impl M3c2Params {
    /// Scales derived from the reference cloud's sampling density: the
    /// plane-fit diameter is 20× the mean nearest-neighbor spacing, the
    /// cylinder radius half of that, and the search depth 5 diameters.
    pub fn auto(reference: &PointCloud) -> Result<Self, EvalError> {
        if reference.len() < 2 {
            return Err(EvalError::UndefinedMetric(
                "need at least 2 reference points to estimate spacing".into(),
            ));
        }
        let tree = KdTree3::build(&reference.points);
        let mut sum = 0.0;
        for p in &reference.points {
            // Two nearest: the point itself (distance 0) and its neighbor.
            let nn = tree.k_nearest(p, 2);
            sum += nn[1].1;
        }
        let d = 20.0 * sum / reference.len() as f64;
        Ok(Self {
            normal_scale: d,
            cylinder_radius: d / 2.0,
            max_depth: 5.0 * d,
            core_stride: 1,
        })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.normal_scale > 0.0)
            || !(self.cylinder_radius > 0.0)
            || !(self.max_depth > 0.0)
            || self.core_stride == 0
        {
            return Err(EvalError::InvalidParameter(format!(
                "m3c2 scales must be positive and stride >= 1: D {}, r {}, depth {}, stride {}",
                self.normal_scale, self.cylinder_radius, self.max_depth, self.core_stride
            )));
        }
        Ok(())
    }
}

/// Per-core-point signed distances (NaN at invalid core points) and their
/// RMSE over the valid subset.
#[derive(Clone, Debug)]
pub struct M3c2Output {
    /// Indices into the reference cloud of the sampled core points.
    pub core_indices: Vec<usize>,
    /// Signed distance per core point; NaN where the normal fit was
    /// degenerate or a projection cylinder came up empty.
    pub distances: Vec<f64>,
    pub valid_count: usize,
    pub rmse: f64,
}

/// Least-squares plane normal of a neighborhood, canonically oriented
/// (positive z, ties broken toward positive y then x). Returns None when
/// the neighborhood is degenerate (fewer than 3 points, coincident, or
/// collinear).
fn fit_plane_normal(points: &[Vector3<f64>], idx: &[usize]) -> Option<Vector3<f64>> {
    if idx.len() < 3 {
        return None;
    }
    let mut centroid = Vector3::zeros();
    for &i in idx {
        centroid += points[i];
    }
    centroid /= idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let _ = l0;
    if l2 <= 0.0 || l1 <= 1e-9 * l2 {
        return None; // coincident or collinear neighborhood
    }
    let mut n = eig.eigenvectors.column(order[0]).into_owned().normalize();
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        n = -n;
    }
    Some(n)
}

/// Mean projection along `normal` of the points inside the cylinder of
/// radius `radius` and axial half-length `depth` centered at `core`.
fn cylinder_mean(
    points: &[Vector3<f64>],
    tree: &KdTree3,
    core: &Vector3<f64>,
    normal: &Vector3<f64>,
    radius: f64,
    depth: f64,
) -> Option<f64> {
    let reach = (radius * radius + depth * depth).sqrt();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in tree.within_radius(core, reach) {
        let d = points[i] - core;
        let axial = d.dot(normal);
        if axial.abs() > depth {
            continue;
        }
        let radial2 = (d - axial * normal).norm_squared();
        if radial2 <= radius * radius {
            sum += axial;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// M3C2 signed distances from `reference` to `compared`: per core point
/// (every `core_stride`-th reference point), fit a plane normal over the
/// D/2 reference neighborhood, project both clouds' cylinder contents onto
/// it, and report mean(compared) − mean(reference).
pub fn m3c2(
    reference: &PointCloud,
    compared: &PointCloud,
    params: &M3c2Params,
) -> Result<M3c2Output, EvalError> {
    params.validate()?;
    if reference.is_empty() || compared.is_empty() {
        return Err(EvalError::UndefinedMetric(
            "m3c2 needs two nonempty clouds".into(),
        ));
    }
    let ref_tree = KdTree3::build(&reference.points);
    let cmp_tree = KdTree3::build(&compared.points);
    let core_indices: Vec<usize> = (0..reference.len()).step_by(params.core_stride).collect();
    let distances: Vec<f64> = core_indices
        .par_iter()
        .map(|&ci| {
            let core = reference.points[ci];
            let neighborhood = ref_tree.within_radius(&core, params.normal_scale / 2.0);
            let Some(normal) = fit_plane_normal(&reference.points, &neighborhood) else {
                return f64::NAN;
            };
            let mean_ref = cylinder_mean(
                &reference.points,
                &ref_tree,
                &core,
                &normal,
                params.cylinder_radius,
                params.max_depth,
            );
            let mean_cmp = cylinder_mean(
                &compared.points,
                &cmp_tree,
                &core,
                &normal,
                params.cylinder_radius,
                params.max_depth,
            );
            match (mean_ref, mean_cmp) {
                (Some(r), Some(c)) => c - r,
                _ => f64::NAN,
            }
        })
        .collect();
    let valid: Vec<f64> = distances.iter().copied().filter(|d| d.is_finite()).collect();
    if valid.is_empty() {
        return Err(EvalError::UndefinedMetric(
            "no valid m3c2 core points".into(),
        ));
    }
    let rmse = (valid.iter().map(|d| d * d).sum::<f64>() / valid.len() as f64).sqrt();
    Ok(M3c2Output {
        core_indices,
        distances,
        valid_count: valid.len(),
        rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Vector3, Vector4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raster_const(w: usize, h: usize, ch: usize, v: f32) -> Raster {
        let mut r = Raster::new(w, h, ch).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    r.set(x, y, c, v);
                }
            }
        }
        r
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud {
            points: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
            normals: None,
        }
    }

    /// Grid plane z = height over [x0,x1]×[y0,y1] with spacing s.
    fn grid_plane(x0: f64, x1: f64, y0: f64, y1: f64, s: f64, height: f64) -> PointCloud {
        let mut points = Vec::new();
        let nx = ((x1 - x0) / s).round() as usize + 1;
        let ny = ((y1 - y0) / s).round() as usize + 1;
        for j in 0..ny {
            for i in 0..nx {
                points.push(Vector3::new(x0 + s * i as f64, y0 + s * j as f64, height));
            }
        }
        PointCloud {
            points,
            normals: None,
        }
    }

    fn brute_fraction(from: &PointCloud, to: &PointCloud, tau: f64) -> f64 {
        let hits = from
            .points
            .iter()
            .filter(|p| {
                to.points
                    .iter()
                    .map(|q| (*p - q).norm())
                    .fold(f64::INFINITY, f64::min)
                    < tau
            })
            .count();
        hits as f64 / from.len() as f64
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = raster_const(8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset_hand_value() {
        let gt = raster_const(8, 8, 3, 0.3);
        let pred = raster_const(8, 8, 3, 0.3 + 10.0 / 255.0);
        let expect = 20.0 * (25.5f64).log10();
        assert_abs_diff_eq!(psnr(&pred, &gt).unwrap(), expect, epsilon = 1e-3);
        let pred2 = raster_const(8, 8, 3, 0.4);
        assert_abs_diff_eq!(psnr(&pred2, &gt).unwrap(), 20.0, epsilon = 1e-4);
    }

    #[test]
    fn psnr_rejects_mismatch() {
        let a = raster_const(8, 8, 3, 0.3);
        let b = raster_const(8, 7, 3, 0.3);
        assert!(matches!(psnr(&a, &b), Err(EvalError::DimensionMismatch(_))));
    }

    #[test]
    fn identical_clouds_score_100() {
        let c = random_cloud(1, 50);
        let r = fscore(&c, &c, 0.05).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.fscore_percent, 100.0);
    }

    #[test]
    fn one_outlier_fscore_hand_case() {
        let truth = random_cloud(2, 9);
        let tau = 0.01;
        let mut rec = truth.clone();
        rec.points.push(Vector3::new(10.0 * tau + 5.0, 0.0, 0.0));
        let r = fscore(&rec, &truth, tau).unwrap();
        assert_eq!(r.precision, 0.9);
        assert_eq!(r.recall, 1.0);
        assert_abs_diff_eq!(r.fscore_percent, 200.0 * 0.9 / 1.9, epsilon = 1e-12);
    }

    #[test]
    fn fscore_matches_brute_force_exactly() {
        for seed in 0..3u64 {
            let a = random_cloud(10 + seed, 500);
            let b = random_cloud(20 + seed, 500);
            for tau in [0.01, 0.05, 0.2, 1.0] {
                let r = fscore(&a, &b, tau).unwrap();
                assert_eq!(r.precision, brute_fraction(&a, &b, tau), "tau {tau}");
                assert_eq!(r.recall, brute_fraction(&b, &a, tau), "tau {tau}");
            }
        }
    }

    #[test]
    fn fscore_role_symmetry_and_zero_case() {
        let a = random_cloud(30, 80);
        let b = random_cloud(31, 120);
        let ab = fscore(&a, &b, 0.1).unwrap();
        let ba = fscore(&b, &a, 0.1).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
        // Far-apart clouds at a tiny threshold: P = R = 0 → F = 0, not NaN.
        let far = PointCloud {
            points: a.points.iter().map(|p| p + Vector3::new(100.0, 0.0, 0.0)).collect(),
            normals: None,
        };
        let r = fscore(&a, &far, 1e-6).unwrap();
        assert_eq!(r.fscore_percent, 0.0);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let a = random_cloud(4, 10);
        let empty = PointCloud {
            points: vec![],
            normals: None,
        };
        assert!(matches!(
            fscore(&a, &empty, 0.1),
            Err(EvalError::UndefinedMetric(_))
        ));
        assert!(matches!(
            m3c2(&empty, &a, &M3c2Params {
                normal_scale: 1.0,
                cylinder_radius: 0.5,
                max_depth: 5.0,
                core_stride: 1
            }),
            Err(EvalError::UndefinedMetric(_))
        ));
    }

    proptest! {
        #[test]
        fn fscore_monotone_in_threshold(seed in 0u64..50, t1 in 0.01f64..0.5, dt in 0.01f64..0.5) {
            let a = random_cloud(seed, 40);
            let b = random_cloud(seed + 1000, 40);
            let r1 = fscore(&a, &b, t1).unwrap();
            let r2 = fscore(&a, &b, t1 + dt).unwrap();
            prop_assert!(r2.precision >= r1.precision);
            prop_assert!(r2.recall >= r1.recall);
        }
    }

    #[test]
    fn m3c2_identical_clouds_zero() {
        let c = random_cloud(40, 300);
        let params = M3c2Params::auto(&c).unwrap();
        let out = m3c2(&c, &c, &params).unwrap();
        assert!(out.valid_count > 0);
        assert_eq!(out.rmse, 0.0);
        for d in out.distances.iter().filter(|d| d.is_finite()) {
            assert_eq!(*d, 0.0);
        }
    }

    #[test]
    fn parallel_planes_recover_separation() {
        let delta = 0.01;
        let reference = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.05, 0.0);
        let compared = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.05, delta);
        let params = M3c2Params {
            normal_scale: 0.5,
            cylinder_radius: 0.25,
            max_depth: 1.0,
            core_stride: 7,
        };
        let out = m3c2(&reference, &compared, &params).unwrap();
        assert_eq!(out.valid_count, out.distances.len());
        for (i, d) in out.distances.iter().enumerate() {
            assert!((d - delta).abs() < 1e-6, "core {i}: {d}");
        }
        assert_abs_diff_eq!(out.rmse, delta, epsilon = 1e-6);
        // Swapping the roles flips the sign.
        let swapped = m3c2(&compared, &reference, &params).unwrap();
        for (a, b) in out.distances.iter().zip(&swapped.distances) {
            assert_abs_diff_eq!(*a, -*b, epsilon = 1e-6);
        }
    }

    #[test]
    fn tilted_plane_rmse_matches_analytic_value() {
        let theta = 0.02f64;
        let reference = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.05, 0.0);
        // Compared plane rotated about the x axis, oversized so every core
        // point's cylinder is fully covered.
        let base = grid_plane(-1.5, 1.5, -1.5, 1.5, 0.05, 0.0);
        let compared = PointCloud {
            points: base
                .points
                .iter()
                .map(|p| Vector3::new(p.x, p.y * theta.cos(), p.y * theta.sin()))
                .collect(),
            normals: None,
        };
        // Radius chosen so no grid point lands exactly on the cylinder
        // boundary (0.25 forms 3-4-5 triples with the 0.05 spacing, and the
        // rotation then breaks those ties asymmetrically, biasing the mean).
        let params = M3c2Params {
            normal_scale: 0.5,
            cylinder_radius: 0.23,
            max_depth: 1.0,
            core_stride: 1,
        };
        let out = m3c2(&reference, &compared, &params).unwrap();
        assert_eq!(out.valid_count, out.distances.len());
        let expected: Vec<f64> = out
            .core_indices
            .iter()
            .map(|&i| reference.points[i].y * theta.tan())
            .collect();
        let analytic_rmse =
            (expected.iter().map(|d| d * d).sum::<f64>() / expected.len() as f64).sqrt();
        assert!(
            (out.rmse - analytic_rmse).abs() <= 0.01 * analytic_rmse,
            "rmse {} vs analytic {analytic_rmse}",
            out.rmse
        );
        for (d, e) in out.distances.iter().zip(&expected) {
            assert!((d - e).abs() < 5e-4, "{d} vs {e}");
        }
    }

    #[test]
    fn m3c2_invariant_under_joint_rigid_motion() {
        let delta = 0.01;
        let reference = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.05, 0.0);
        let compared = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.05, delta);
        let params = M3c2Params {
            normal_scale: 0.5,
            cylinder_radius: 0.25,
            max_depth: 1.0,
            core_stride: 11,
        };
        let base = m3c2(&reference, &compared, &params).unwrap();
        // Modest rotation keeping the plane normal's z positive, so the
        // canonical orientation matches the untransformed run.
        let axis = Vector3::new(1.0, 1.0, 0.0).normalize();
        let rot = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            0.3,
        );
        let m = *rot.matrix();
        let t = Vector3::new(0.7, -1.3, 2.2);
        let moved = m3c2(
            &reference.transformed(&m, &t),
            &compared.transformed(&m, &t),
            &params,
        )
        .unwrap();
        for (a, b) in base.distances.iter().zip(&moved.distances) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(base.rmse, moved.rmse, epsilon = 1e-6);
    }

    #[test]
    fn collinear_neighborhoods_are_invalid_not_errors() {
        // A planar patch plus a distant straight line: cores on the line
        // have degenerate normals and must come back NaN.
        let mut cloud = grid_plane(-1.0, 1.0, -1.0, 1.0, 0.1, 0.0);
        let patch_len = cloud.len();
        for i in 0..30 {
            cloud
                .points
                .push(Vector3::new(50.0 + 0.05 * i as f64, 0.0, 0.0));
        }
        let params = M3c2Params {
            normal_scale: 0.6,
            cylinder_radius: 0.3,
            max_depth: 1.0,
            core_stride: 1,
        };
        let out = m3c2(&cloud, &cloud, &params).unwrap();
        for (k, &ci) in out.core_indices.iter().enumerate() {
            if ci >= patch_len {
                assert!(out.distances[k].is_nan(), "line core {ci} should be invalid");
            } else {
                assert!(out.distances[k].is_finite());
            }
        }
        // An all-degenerate reference (single line) is an undefined metric.
        let line = PointCloud {
            points: (0..20).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect(),
            normals: None,
        };
        assert!(matches!(
            m3c2(&line, &line, &params),
            Err(EvalError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auto_params_follow_sampling_density() {
        let plane = grid_plane(0.0, 1.0, 0.0, 1.0, 0.05, 0.0);
        let p = M3c2Params::auto(&plane).unwrap();
        assert_abs_diff_eq!(p.normal_scale, 20.0 * 0.05, epsilon = 1e-9);
        assert_abs_diff_eq!(p.cylinder_radius, p.normal_scale / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.max_depth, 5.0 * p.normal_scale, epsilon = 1e-12);
        assert_eq!(p.core_stride, 1);
    }

    #[test]
    fn extraction_keeps_only_opaque_gaussians() {
        let mk = |o: f64, x: f64| {
            GaussianPrimitive::new(
                Vector3::new(x, 0.0, 0.0),
                Vector3::new(0.1, 0.1, 0.1),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                o,
                Vector3::new(0.5, 0.5, 0.5),
            )
            .unwrap()
        };
        let gs = vec![mk(0.6, 0.0), mk(0.4, 1.0), mk(0.51, 2.0)];
        let cloud = extract_point_cloud(&gs, 0.5);
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0].x, 0.0);
        assert_eq!(cloud.points[1].x, 2.0);
    }

    #[test]
    fn cloud_normals_validated_and_diag_computed() {
        let bad = PointCloud::new(
            vec![Vector3::zeros()],
            Some(vec![Vector3::new(0.5, 0.0, 0.0)]),
        );
        assert!(bad.is_err());
        let c = PointCloud::new(
            vec![Vector3::zeros(), Vector3::new(1.0, 2.0, 2.0)],
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(c.bounding_diagonal(), 3.0, epsilon = 1e-12);
    }
}
