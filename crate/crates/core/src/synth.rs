//! Synthetic ground-truth scenes: random Gaussians in a unit box, a camera
//! ring facing their centroid, rendered images and depths, per-view
//! affine-distorted "monocular" depth with known scale/shift, and sparse
//! points at the Gaussian centers. The generator is the oracle the
//! end-to-end tests pivot on: every stored value is reproducible from the
//! seed, and stored Gaussians are pre-quantized to file precision so a
//! re-render from the written scene matches the stored images byte for byte.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::project_sparse_depth;
use crate::geom::{logit, CameraModel, GaussianPrimitive, GeomError, Raster, SparsePointSet};
use crate::io::{
    save_experiment_config, write_camera_json, write_gaussians_ply, write_image_png,
    write_raw_depth, write_sparse_ply, ExperimentConfig, IoError, PlyFormat,
};
use crate::render::{render, RenderError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Generator settings.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub image_size: u32,
    pub seed: u64,
    /// RMS ceiling for the smooth depth-error field; view v gets RMS
    /// `noise_max · v / (n_views − 1)` (view 0 is always error-free).
    pub noise_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 20,
            n_views: 8,
            image_size: 64,
            seed: 0,
            noise_max: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_gaussians == 0 || self.n_views == 0 {
            return Err(SynthError::InvalidInput(
                "need at least one gaussian and one view".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(SynthError::InvalidInput(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if !(self.noise_max >= 0.0) || !self.noise_max.is_finite() {
            return Err(SynthError::InvalidInput(format!(
                "noise_max must be nonnegative, got {}",
                self.noise_max
            )));
        }
        Ok(())
    }
}

/// One generated view with its ground truth and distorted initial depth.
#[derive(Clone, Debug)]
pub struct SyntheticView {
    pub camera: CameraModel,
    pub image: Raster,
    pub depth_gt: Raster,
    /// Affine-distorted initial depth, optionally corrupted by a smooth
    /// error field; aligning it against the sparse targets recovers
    /// (scale_true, shift_true).
    pub depth_init: Raster,
    pub scale_true: f64,
    pub shift_true: f64,
    /// RMS of this view's depth-error field (0 = exact).
    pub noise_sigma: f64,
}

/// A full generated scene.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub views: Vec<SyntheticView>,
    pub sparse: SparsePointSet,
    pub sparse_colors: Vec<Vector3<f64>>,
}

/// Sidecar metadata stored as scene.json.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneMeta {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub image_size: u32,
    pub seed: u64,
    pub noise_max: f64,
    pub views: Vec<ViewMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewMeta {
    pub scale_true: f64,
    pub shift_true: f64,
    pub noise_sigma: f64,
}

/// Scene-directory layout: fixed names shared by the generator, the CLI
/// stages, and the tests.
pub mod scene_paths {
    use std::path::{Path, PathBuf};

    pub fn gt_gaussians(dir: &Path) -> PathBuf {
        dir.join("gt_gaussians.ply")
    }
    pub fn sparse(dir: &Path) -> PathBuf {
        dir.join("sparse.ply")
    }
    pub fn meta(dir: &Path) -> PathBuf {
        dir.join("scene.json")
    }
    pub fn config(dir: &Path) -> PathBuf {
        dir.join("config.toml")
    }
    pub fn camera(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("camera_{v:03}.json"))
    }
    pub fn image(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("image_{v:03}.png"))
    }
    pub fn depth_gt(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("depth_gt_{v:03}.cdg"))
    }
    pub fn depth_init(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("depth_init_{v:03}.cdg"))
    }
    pub fn aligned(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("aligned_{v:03}.cdg"))
    }
    pub fn align_sidecar(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("aligned_{v:03}.json"))
    }
    pub fn confidence(dir: &Path, v: usize) -> PathBuf {
        dir.join(format!("confidence_{v:03}.conf"))
    }
    pub fn checkpoint_final(dir: &Path) -> PathBuf {
        dir.join("checkpoint_final.ply")
    }
    pub fn checkpoint(dir: &Path, iteration: usize) -> PathBuf {
        dir.join(format!("checkpoint_{iteration:06}.ply"))
    }
    pub fn history(dir: &Path) -> PathBuf {
        dir.join("history.csv")
    }

    /// Number of consecutive views present, counted by camera files.
    pub fn view_count(dir: &Path) -> usize {
        (0..).take_while(|&v| camera(dir, v).exists()).count()
    }
}

/// Rounds every stored component through the f32 file representation so the
/// in-memory scene equals its on-disk form exactly (same reconstruction as
/// the checkpoint reader: log of the rounded scale, logit of the rounded
/// opacity, quaternion kept as stored).
fn quantize_to_file_precision(g: &GaussianPrimitive) -> GaussianPrimitive {
    let f = |v: f64| v as f32 as f64;
    let s = g.scale();
    GaussianPrimitive {
        center: g.center.map(f),
        log_scale: Vector3::new(f(s[0]).ln(), f(s[1]).ln(), f(s[2]).ln()),
        rotation: g.rotation.map(f),
        opacity_logit: logit(f(g.opacity()).clamp(1e-9, 1.0 - 1e-9)),
        color: g.color.map(f),
    }
}

/// Camera `index` of `count` on a ring of radius 2.2 at height 0.35 above
/// the scene centroid, looking at the centroid, z-up, with focal length
/// 1.2× the image size and the principal point at the pixel-grid center.
fn ring_camera(
    centroid: &Vector3<f64>,
    index: usize,
    count: usize,
    size: u32,
) -> Result<CameraModel, GeomError> {
    let angle = 2.0 * std::f64::consts::PI * index as f64 / count as f64;
    let eye = centroid + Vector3::new(2.2 * angle.cos(), 2.2 * angle.sin(), 0.35);
    let f = 1.2 * size as f64;
    let c = (size - 1) as f64 / 2.0;
    let k = Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0);
    CameraModel::look_at(eye, *centroid, Vector3::new(0.0, 0.0, 1.0), k, size, size)
}

pub fn generate_synthetic_scene(cfg: &SynthConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let gaussians: Vec<GaussianPrimitive> = (0..cfg.n_gaussians)
        .map(|_| {
            let center = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let base = rng.gen_range(0.06..0.12);
            let scale = Vector3::new(
                base * rng.gen_range(-0.3..0.3f64).exp(),
                base * rng.gen_range(-0.3..0.3f64).exp(),
                base * rng.gen_range(-0.3..0.3f64).exp(),
            );
            let mut q = Vector4::zeros();
            while q.norm() < 1e-6 {
                q = Vector4::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
            }
            let opacity = rng.gen_range(0.55..0.85);
            let color = Vector3::new(
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
            );
            let g = GaussianPrimitive::new(center, scale, q, opacity, color)?;
            Ok(quantize_to_file_precision(&g))
        })
        .collect::<Result<_, SynthError>>()?;

    let centroid = gaussians.iter().map(|g| g.center).sum::<Vector3<f64>>()
        / cfg.n_gaussians as f64;

    // Sparse points sit at the (file-precision) Gaussian centers with
    // synthetic reprojection errors driving the alignment weights.
    let reproj: Vec<f64> = (0..cfg.n_gaussians)
        .map(|_| rng.gen_range(0.0..2.0) as f32 as f64)
        .collect();
    let sparse = SparsePointSet::new(gaussians.iter().map(|g| g.center).collect(), Some(reproj))
        .map_err(SynthError::Geom)?;
    let sparse_colors: Vec<Vector3<f64>> = gaussians.iter().map(|g| g.color).collect();

    let mut views = Vec::with_capacity(cfg.n_views);
    for v in 0..cfg.n_views {
        let camera = ring_camera(&centroid, v, cfg.n_views, cfg.image_size)?;
        let out = render(&gaussians, &camera)?;
        let scale_true = rng.gen_range(0.6..1.8);
        let shift_true = rng.gen_range(-0.4..0.6);

        // Distort the rendered depth by the inverse affine map, then patch
        // each sparse pixel to be exactly consistent with its projected
        // point depth so the alignment optimum is (scale_true, shift_true).
        let mut depth_init = out.depth.clone();
        for y in 0..depth_init.height() {
            for x in 0..depth_init.width() {
                if depth_init.is_valid(x, y) {
                    let d = depth_init.get(x, y, 0) as f64;
                    depth_init.set(x, y, 0, ((d - shift_true) / scale_true) as f32);
                }
            }
        }
        let (target, _) = project_sparse_depth(&sparse, &camera);
        for y in 0..target.height() {
            for x in 0..target.width() {
                if target.is_valid(x, y) {
                    let d = target.get(x, y, 0) as f64;
                    depth_init.set_valid(x, y, true);
                    depth_init.set(x, y, 0, ((d - shift_true) / scale_true) as f32);
                }
            }
        }

        let noise_sigma = if cfg.n_views > 1 {
            cfg.noise_max * (v as f64 / (cfg.n_views - 1) as f64)
        } else {
            0.0
        };
        if noise_sigma > 0.0 {
            // Monocular-style structured error: a smooth random field of a
            // few low-frequency plane waves with RMS `noise_sigma`. Unlike
            // white pixel noise — which a mean-seeking depth loss simply
            // averages away — a smooth field is locally biased, so a trainer
            // that over-trusts it pays for it.
            const WAVES: usize = 3;
            let size = cfg.image_size as f64;
            let waves: Vec<[f64; 3]> = (0..WAVES)
                .map(|_| {
                    let theta = rng.gen_range(0.0..TAU);
                    let omega = TAU * rng.gen_range(1.0..3.0) / size;
                    [omega * theta.cos(), omega * theta.sin(), rng.gen_range(0.0..TAU)]
                })
                .collect();
            let amp = noise_sigma * (2.0 / WAVES as f64).sqrt();
            for y in 0..depth_init.height() {
                for x in 0..depth_init.width() {
                    if depth_init.is_valid(x, y) {
                        let field: f64 = waves
                            .iter()
                            .map(|[ax, ay, ph]| (ax * x as f64 + ay * y as f64 + ph).sin())
                            .sum::<f64>()
                            * amp;
                        let d = depth_init.get(x, y, 0) as f64 + field;
                        depth_init.set(x, y, 0, d as f32);
                    }
                }
            }
        }

        views.push(SyntheticView {
            camera,
            image: out.color,
            depth_gt: out.depth,
            depth_init,
            scale_true,
            shift_true,
            noise_sigma,
        });
    }

    Ok(SyntheticScene {
        gaussians,
        views,
        sparse,
        sparse_colors,
    })
}

/// Writes a scene as a flat directory: gt_gaussians.ply, sparse.ply,
/// per-view image_NNN.png / depth_gt_NNN.cdg / depth_init_NNN.cdg /
/// camera_NNN.json, scene.json metadata, and a default config.toml seeded
/// with the generator seed.
pub fn write_scene(dir: &Path, scene: &SyntheticScene, cfg: &SynthConfig) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| {
        SynthError::Io(IoError::Io {
            path: dir.to_owned(),
            source: e,
        })
    })?;
    write_gaussians_ply(
        &scene_paths::gt_gaussians(dir),
        &scene.gaussians,
        PlyFormat::BinaryLittleEndian,
    )?;
    write_sparse_ply(
        &scene_paths::sparse(dir),
        &scene.sparse,
        Some(&scene.sparse_colors),
        PlyFormat::BinaryLittleEndian,
    )?;
    for (v, view) in scene.views.iter().enumerate() {
        write_camera_json(&scene_paths::camera(dir, v), &view.camera)?;
        let mut image = view.image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                for c in 0..3 {
                    let val = image.get(x, y, c).clamp(0.0, 1.0);
                    image.set(x, y, c, val);
                }
            }
        }
        write_image_png(&scene_paths::image(dir, v), &image)?;
        write_raw_depth(&scene_paths::depth_gt(dir, v), &view.depth_gt)?;
        write_raw_depth(&scene_paths::depth_init(dir, v), &view.depth_init)?;
    }
    let meta = SceneMeta {
        n_gaussians: cfg.n_gaussians,
        n_views: cfg.n_views,
        image_size: cfg.image_size,
        seed: cfg.seed,
        noise_max: cfg.noise_max,
        views: scene
            .views
            .iter()
            .map(|v| ViewMeta {
                scale_true: v.scale_true,
                shift_true: v.shift_true,
                noise_sigma: v.noise_sigma,
            })
            .collect(),
    };
    write_scene_meta(&scene_paths::meta(dir), &meta)?;
    let experiment = ExperimentConfig {
        seed: Some(cfg.seed),
        ..ExperimentConfig::default()
    };
    save_experiment_config(&scene_paths::config(dir), &experiment)?;
    Ok(())
}

pub fn write_scene_meta(path: &Path, meta: &SceneMeta) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(meta).expect("scene meta serialization");
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::Io {
        path: path.to_owned(),
        source: e,
    })
}

pub fn read_scene_meta(path: &Path) -> Result<SceneMeta, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::Io {
        path: path.to_owned(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| IoError::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}
