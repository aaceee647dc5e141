//! splatdepth: chains the pipeline stages — synthetic scene generation,
//! sparse-anchored depth alignment, confidence mapping, Gaussian training,
//! rendering, and 2D/3D evaluation — into reproducible experiments. Every
//! run is a pure function of its inputs, flags, and seed; errors exit
//! nonzero with a single-line `ERROR:<stage>:<message>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};

use splatdepth_core::align::{align_depth, project_sparse_depth};
use splatdepth_core::confidence::confidence_map;
use splatdepth_core::eval::{extract_point_cloud, fscore, m3c2, psnr, M3c2Params, PointCloud};
use splatdepth_core::io::{
    load_experiment_config, read_align_sidecar, read_camera_json, read_gaussians_ply,
    read_history_csv, read_image_png, read_ply, read_point_cloud_ply, read_raw_depth,
    read_sparse_ply, write_align_sidecar, write_eval2d_report, write_eval3d_report,
    write_gaussians_ply, write_history_csv, write_image_png, write_m3c2_ply, write_raw_depth,
    AlignSidecar, Eval2dReport, Eval3dReport, ExperimentConfig, ImagePairReport, PlyFormat,
    GAUSSIAN_PLY_PROPERTIES,
};
use splatdepth_core::loss::{ssim, LossConfig};
use splatdepth_core::render::render;
use splatdepth_core::synth::{generate_synthetic_scene, scene_paths, write_scene, SynthConfig};
use splatdepth_core::train::{init_from_sparse, train, TrainView, ViewDepthData};

#[derive(Parser)]
#[command(
    name = "splatdepth",
    version,
    about = "Confidence-weighted depth-regularized Gaussian splatting toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truth scene directory.
    Synth {
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        gaussians: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// RMS ceiling for the graded initial-depth error field across views.
        #[arg(long, default_value_t = 0.0)]
        noise_max: f64,
    },
    /// Fit per-view scale/shift against the scene's sparse points.
    Align {
        #[arg(long)]
        scene: PathBuf,
        /// Output directory (defaults to the scene directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config file (defaults to <scene>/config.toml when present).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute per-view fused confidence maps.
    Confidence {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Optimize Gaussians against the scene's views.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a checkpoint through a camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_depth: Option<PathBuf>,
    },
    /// PSNR/SSIM between same-named PNGs in two directories.
    Eval2d {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// F-score and M3C2 distances between two point clouds.
    Eval3d {
        /// Reconstructed cloud (Gaussian checkpoints are extracted by
        /// opacity; plain clouds are used as-is).
        #[arg(long)]
        rec: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// F-score distance threshold (default: GT bounding diagonal / 500).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_report: PathBuf,
        /// Optional per-core-point distance PLY for visualization.
        #[arg(long)]
        out_distances: Option<PathBuf>,
    },
    /// Downsample a history CSV to a plot-ready size.
    Curves {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep every N-th record plus the last (default: ~200 rows).
        #[arg(long)]
        stride: Option<usize>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Align { .. } => "align",
            Command::Confidence { .. } => "confidence",
            Command::Train { .. } => "train",
            Command::Render { .. } => "render",
            Command::Eval2d { .. } => "eval2d",
            Command::Eval3d { .. } => "eval3d",
            Command::Curves { .. } => "curves",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("ERROR:cli:{}", one_line(&e.to_string()));
            return ExitCode::FAILURE;
        }
    };
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{stage}:{}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().collect::<Vec<_>>().join("; ")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            gaussians,
            views,
            size,
            seed,
            noise_max,
        } => {
            let cfg = SynthConfig {
                n_gaussians: gaussians,
                n_views: views,
                image_size: size,
                seed,
                noise_max,
            };
            let scene = generate_synthetic_scene(&cfg)?;
            write_scene(&out, &scene, &cfg)?;
            Ok(())
        }
        Command::Align { scene, out, config } => run_align(&scene, out, config.as_deref()),
        Command::Confidence { scene, out, config } => {
            run_confidence(&scene, out, config.as_deref())
        }
        Command::Train { scene, config, out } => run_train(&scene, out, config.as_deref()),
        Command::Render {
            checkpoint,
            camera,
            out_image,
            out_depth,
        } => run_render(&checkpoint, &camera, &out_image, out_depth.as_deref()),
        Command::Eval2d { pred, gt, out } => run_eval2d(&pred, &gt, &out),
        Command::Eval3d {
            rec,
            gt,
            threshold,
            config,
            out_report,
            out_distances,
        } => run_eval3d(
            &rec,
            &gt,
            threshold,
            config.as_deref(),
            &out_report,
            out_distances.as_deref(),
        ),
        Command::Curves { history, out, stride } => run_curves(&history, &out, stride),
    }
}

/// Explicit config file > <scene>/config.toml > built-in defaults.
fn load_config(explicit: Option<&Path>, scene: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(path) = explicit {
        return Ok(load_experiment_config(path)?);
    }
    if let Some(dir) = scene {
        let path = scene_paths::config(dir);
        if path.exists() {
            return Ok(load_experiment_config(&path)?);
        }
    }
    Ok(ExperimentConfig::default())
}

fn output_dir(scene: &Path, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| scene.to_owned());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn scene_views(scene: &Path) -> Result<usize> {
    let n = scene_paths::view_count(scene);
    if n == 0 {
        bail!("no camera_NNN.json views under {}", scene.display());
    }
    Ok(n)
}

fn run_align(scene: &Path, out: Option<PathBuf>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, Some(scene))?;
    let out = output_dir(scene, out)?;
    let n = scene_views(scene)?;
    let (sparse, _) = read_sparse_ply(&scene_paths::sparse(scene))?;
    for v in 0..n {
        let camera = read_camera_json(&scene_paths::camera(scene, v))?;
        let initial = read_raw_depth(&scene_paths::depth_init(scene, v))?;
        let (target, weights) = project_sparse_depth(&sparse, &camera);
        let result = align_depth(&initial, &target, &weights, &cfg.align)
            .with_context(|| format!("view {v}"))?;
        write_raw_depth(&scene_paths::aligned(&out, v), &result.aligned_depth)?;
        write_align_sidecar(
            &scene_paths::align_sidecar(&out, v),
            &AlignSidecar {
                scale: result.scale,
                shift: result.shift,
                alignment_loss: result.alignment_loss,
                valid_count: result.valid_count,
            },
        )?;
    }
    Ok(())
}

fn run_confidence(scene: &Path, out: Option<PathBuf>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, Some(scene))?;
    let out = output_dir(scene, out)?;
    let n = scene_views(scene)?;
    for v in 0..n {
        let image = read_image_png(&scene_paths::image(scene, v))?;
        // Prefer aligned depth; fall back to the raw initial depth.
        let aligned = scene_paths::aligned(scene, v);
        let depth = if aligned.exists() {
            read_raw_depth(&aligned)?
        } else {
            read_raw_depth(&scene_paths::depth_init(scene, v))?
        };
        let map = confidence_map(&image, &depth, &cfg.confidence)
            .with_context(|| format!("view {v}"))?;
        write_raw_depth(&scene_paths::confidence(&out, v), &map)?;
    }
    Ok(())
}

fn run_train(scene: &Path, out: Option<PathBuf>, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, Some(scene))?;
    let out = output_dir(scene, out)?;
    let n = scene_views(scene)?;
    let (sparse, colors) = read_sparse_ply(&scene_paths::sparse(scene))?;
    let initial = init_from_sparse(&sparse, colors.as_deref())?;
    let mut views = Vec::with_capacity(n);
    for v in 0..n {
        let camera = read_camera_json(&scene_paths::camera(scene, v))?;
        let image = read_image_png(&scene_paths::image(scene, v))?;
        // Depth supervision only where the align + confidence stages have
        // produced all three per-view artifacts.
        let aligned = scene_paths::aligned(scene, v);
        let conf = scene_paths::confidence(scene, v);
        let sidecar = scene_paths::align_sidecar(scene, v);
        let depth = if aligned.exists() && conf.exists() && sidecar.exists() {
            Some(ViewDepthData {
                aligned_depth: read_raw_depth(&aligned)?,
                confidence: read_raw_depth(&conf)?,
                alignment_loss: read_align_sidecar(&sidecar)?.alignment_loss,
            })
        } else {
            None
        };
        views.push(TrainView { camera, image, depth });
    }
    let train_cfg = cfg.resolved_train();
    let mut snapshot_err = None;
    let state = train(&initial, &views, &cfg.loss, &train_cfg, |iteration, gs| {
        if snapshot_err.is_none() {
            if let Err(e) = write_gaussians_ply(
                &scene_paths::checkpoint(&out, iteration),
                gs,
                PlyFormat::BinaryLittleEndian,
            ) {
                snapshot_err = Some(e);
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    write_gaussians_ply(
        &scene_paths::checkpoint_final(&out),
        &state.gaussians(),
        PlyFormat::BinaryLittleEndian,
    )?;
    write_history_csv(&scene_paths::history(&out), &state.history)?;
    Ok(())
}

fn run_render(
    checkpoint: &Path,
    camera: &Path,
    out_image: &Path,
    out_depth: Option<&Path>,
) -> Result<()> {
    let gaussians = read_gaussians_ply(checkpoint)?;
    let camera = read_camera_json(camera)?;
    let output = render(&gaussians, &camera)?;
    let mut color = output.color;
    for y in 0..color.height() {
        for x in 0..color.width() {
            for c in 0..3 {
                let v = color.get(x, y, c).clamp(0.0, 1.0);
                color.set(x, y, c, v);
            }
        }
    }
    write_image_png(out_image, &color)?;
    if let Some(path) = out_depth {
        write_raw_depth(path, &output.depth)?;
    }
    Ok(())
}

fn run_eval2d(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("listing {}", pred.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png") && gt.join(n).exists())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(
            "no PNGs common to {} and {}",
            pred.display(),
            gt.display()
        );
    }
    let mut views = Vec::with_capacity(names.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0f64, 0.0f64);
    for name in names {
        let p = read_image_png(&pred.join(&name))?;
        let g = read_image_png(&gt.join(&name))?;
        let ps = psnr(&p, &g).with_context(|| name.clone())?;
        let ss = ssim(&p, &g, &LossConfig::default()).with_context(|| name.clone())?;
        psnr_sum += ps;
        ssim_sum += ss;
        views.push(ImagePairReport {
            name,
            psnr: ps.is_finite().then_some(ps),
            ssim: ss,
        });
    }
    let count = views.len() as f64;
    let mean_psnr = psnr_sum / count;
    let report = Eval2dReport {
        mean_psnr: mean_psnr.is_finite().then_some(mean_psnr),
        mean_ssim: ssim_sum / count,
        views,
    };
    write_eval2d_report(out, &report)?;
    Ok(())
}

/// Reads a PLY as a point cloud; Gaussian checkpoints are converted by
/// keeping centers whose opacity exceeds the extraction threshold.
fn load_cloud(path: &Path, extraction_opacity: f64) -> Result<PointCloud> {
    let ply = read_ply(path)?;
    if ply.properties == GAUSSIAN_PLY_PROPERTIES {
        let gaussians = read_gaussians_ply(path)?;
        let cloud = extract_point_cloud(&gaussians, extraction_opacity);
        if cloud.is_empty() {
            bail!(
                "no Gaussians above opacity {} in {}",
                extraction_opacity,
                path.display()
            );
        }
        Ok(cloud)
    } else {
        Ok(read_point_cloud_ply(path)?)
    }
}

fn run_eval3d(
    rec: &Path,
    gt: &Path,
    threshold: Option<f64>,
    config: Option<&Path>,
    out_report: &Path,
    out_distances: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config, None)?;
    let mut rec_cloud = load_cloud(rec, cfg.eval.extraction_opacity)?;
    let gt_cloud = load_cloud(gt, cfg.eval.extraction_opacity)?;
    if let Some(t) = &cfg.eval.pre_transform {
        let m = Matrix3::from_row_slice(&t[0..9]);
        let shift = Vector3::new(t[9], t[10], t[11]);
        rec_cloud = rec_cloud.transformed(&m, &shift);
    }
    let tau = threshold
        .or(cfg.eval.fscore_threshold)
        .unwrap_or_else(|| gt_cloud.bounding_diagonal() / 500.0);
    let geometric = fscore(&rec_cloud, &gt_cloud, tau)?;
    let params = match cfg.eval.m3c2.clone() {
        Some(p) => p,
        None => M3c2Params::auto(&gt_cloud)?,
    };
    let distances = m3c2(&gt_cloud, &rec_cloud, &params)?;
    write_eval3d_report(
        out_report,
        &Eval3dReport {
            threshold: geometric.threshold,
            precision: geometric.precision,
            recall: geometric.recall,
            fscore_percent: geometric.fscore_percent,
            m3c2_rmse: distances.rmse,
            m3c2_valid_count: distances.valid_count,
            m3c2_core_count: distances.core_indices.len(),
        },
    )?;
    if let Some(path) = out_distances {
        let cores: Vec<Vector3<f64>> = distances
            .core_indices
            .iter()
            .map(|&i| gt_cloud.points[i])
            .collect();
        write_m3c2_ply(path, &cores, &distances.distances, PlyFormat::BinaryLittleEndian)?;
    }
    Ok(())
}

fn run_curves(history: &Path, out: &Path, stride: Option<usize>) -> Result<()> {
    let records = read_history_csv(history)?;
    if records.is_empty() {
        bail!("history {} has no records", history.display());
    }
    let stride = stride.unwrap_or_else(|| records.len().div_ceil(200)).max(1);
    let last = records.len() - 1;
    let rows: Vec<_> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == last)
        .map(|(_, r)| r.clone())
        .collect();
    write_history_csv(out, &rows)?;
    Ok(())
}
