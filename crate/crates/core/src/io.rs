//! File formats and experiment configuration: raw float depth/confidence
//! maps, float-scalar PLY point data (ASCII and binary little-endian),
//! camera JSON, 8-bit PNG images, per-iteration history CSV, and the
//! sectioned experiment config document.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignConfig;
use crate::confidence::ConfidenceConfig;
use crate::eval::{EvalError, M3c2Params, PointCloud};
use crate::geom::{logit, CameraModel, GaussianPrimitive, Raster, SparsePointSet};
use crate::loss::LossConfig;
use crate::train::{HistoryRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_owned(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// Raw depth / confidence maps
// ---------------------------------------------------------------------------

const RAW_DEPTH_MAGIC: &[u8; 4] = b"CDG1";

/// Writes a single-channel raster as magic + dimensions + row-major f32
/// little-endian payload + one validity byte per pixel.
pub fn write_raw_depth(path: &Path, raster: &Raster) -> Result<(), IoError> {
    if raster.channels() != 1 {
        return Err(IoError::InvalidInput(format!(
            "raw depth files hold one channel, got {}",
            raster.channels()
        )));
    }
    let (w, h) = (raster.width(), raster.height());
    let mut bytes = Vec::with_capacity(12 + 5 * w * h);
    bytes.extend_from_slice(RAW_DEPTH_MAGIC);
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for v in raster.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(raster.valid().iter().map(|&v| v as u8));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a file written by [`write_raw_depth`], checking magic and exact size.
pub fn read_raw_depth(path: &Path) -> Result<Raster, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[0..4] != RAW_DEPTH_MAGIC {
        return Err(format_err(path, "missing CDG1 magic"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12usize
        .checked_add(5usize.wrapping_mul(w).wrapping_mul(h))
        .filter(|_| w.checked_mul(h).is_some())
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {} bytes for {w}x{h}, got {}", expected, bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[12..12 + 4 * w * h]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let valid: Vec<bool> = bytes[12 + 4 * w * h..]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format_err(path, format!("validity byte {other} not 0/1"))),
        })
        .collect::<Result<_, _>>()?;
    Raster::from_parts(w, h, 1, data, valid).map_err(|e| format_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// PLY (float scalar properties only)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Vertex table of an all-float PLY file: `data` is row-major with one row
/// per vertex and one column per property.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub format: PlyFormat,
    pub properties: Vec<String>,
    pub vertex_count: usize,
    pub data: Vec<f32>,
}

impl PlyData {
    pub fn new(
        format: PlyFormat,
        properties: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self, IoError> {
        if properties.is_empty() {
            return Err(IoError::InvalidInput("PLY needs at least one property".into()));
        }
        if data.len() % properties.len() != 0 {
            return Err(IoError::InvalidInput(format!(
                "{} values do not fill rows of {} properties",
                data.len(),
                properties.len()
            )));
        }
        let vertex_count = data.len() / properties.len();
        Ok(Self {
            format,
            properties,
            vertex_count,
            data,
        })
    }

    /// Column index of a property name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p == name)
    }

    /// Value of property column `col` for vertex `row`.
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.properties.len() + col]
    }
}

pub fn write_ply(path: &Path, ply: &PlyData) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\n");
    out.extend_from_slice(match ply.format {
        PlyFormat::Ascii => b"format ascii 1.0\n".as_slice(),
        PlyFormat::BinaryLittleEndian => b"format binary_little_endian 1.0\n".as_slice(),
    });
    out.extend_from_slice(format!("element vertex {}\n", ply.vertex_count).as_bytes());
    for p in &ply.properties {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    let cols = ply.properties.len();
    match ply.format {
        PlyFormat::Ascii => {
            for row in ply.data.chunks(cols) {
                let line = row
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                out.extend_from_slice(line.as_bytes());
                out.push(b'\n');
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for v in &ply.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_ply(path: &Path) -> Result<PlyData, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    // The header is ASCII up to and including the end_header line.
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| format_err(path, "no end_header"))?;
    let body_start = bytes[header_end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| header_end + i + 1)
        .ok_or_else(|| format_err(path, "no newline after end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| format_err(path, "header is not valid text"))?;

    let mut lines = header.lines().map(str::trim_end);
    if lines.next() != Some("ply") {
        return Err(format_err(path, "missing ply magic line"));
    }
    let mut format = None;
    let mut vertex_count: Option<usize> = None;
    let mut properties = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => {
                format = Some(PlyFormat::BinaryLittleEndian)
            }
            ["format", other, ..] => {
                return Err(format_err(path, format!("unsupported format {other}")))
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse()
                        .map_err(|_| format_err(path, format!("bad vertex count {n}")))?,
                );
            }
            ["element", kind, ..] => {
                return Err(format_err(path, format!("unsupported element {kind}")))
            }
            ["property", "float" | "float32", name] => {
                if vertex_count.is_none() {
                    return Err(format_err(path, "property before element vertex"));
                }
                properties.push((*name).to_string());
            }
            ["property", ..] => {
                return Err(format_err(
                    path,
                    format!("only float scalar properties are supported: {line}"),
                ))
            }
            _ => return Err(format_err(path, format!("unrecognized header line: {line}"))),
        }
    }
    let format = format.ok_or_else(|| format_err(path, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| format_err(path, "missing element vertex"))?;
    if properties.is_empty() {
        return Err(format_err(path, "no vertex properties"));
    }

    let expected = vertex_count * properties.len();
    let data = match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[body_start..])
                .map_err(|_| format_err(path, "ascii body is not valid text"))?;
            let values: Vec<f32> = body
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| format_err(path, format!("bad float token {t}")))
                })
                .collect::<Result<_, _>>()?;
            if values.len() != expected {
                return Err(format_err(
                    path,
                    format!("expected {expected} values, got {}", values.len()),
                ));
            }
            values
        }
        PlyFormat::BinaryLittleEndian => {
            let body = &bytes[body_start..];
            if body.len() != expected * 4 {
                return Err(format_err(
                    path,
                    format!("expected {} body bytes, got {}", expected * 4, body.len()),
                ));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
    };
    Ok(PlyData {
        format,
        properties,
        vertex_count,
        data,
    })
}

/// Property order of a Gaussian checkpoint PLY.
pub const GAUSSIAN_PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity", "red", "green", "blue",
];

/// Writes Gaussians with world-facing values: center, standard deviations,
/// quaternion (w,x,y,z), opacity in [0,1], RGB color.
pub fn write_gaussians_ply(
    path: &Path,
    gaussians: &[GaussianPrimitive],
    format: PlyFormat,
) -> Result<(), IoError> {
    let mut data = Vec::with_capacity(gaussians.len() * 14);
    for g in gaussians {
        let s = g.scale();
        data.extend_from_slice(&[
            g.center[0] as f32,
            g.center[1] as f32,
            g.center[2] as f32,
            s[0] as f32,
            s[1] as f32,
            s[2] as f32,
            g.rotation[0] as f32,
            g.rotation[1] as f32,
            g.rotation[2] as f32,
            g.rotation[3] as f32,
            g.opacity() as f32,
            g.color[0] as f32,
            g.color[1] as f32,
            g.color[2] as f32,
        ]);
    }
    let props = GAUSSIAN_PLY_PROPERTIES.iter().map(|s| s.to_string()).collect();
    write_ply(path, &PlyData::new(format, props, data)?)
}

pub fn read_gaussians_ply(path: &Path) -> Result<Vec<GaussianPrimitive>, IoError> {
    let ply = read_ply(path)?;
    if ply.properties != GAUSSIAN_PLY_PROPERTIES {
        return Err(format_err(
            path,
            format!("not a Gaussian checkpoint: properties {:?}", ply.properties),
        ));
    }
    (0..ply.vertex_count)
        .map(|r| {
            let v: Vec<f64> = (0..14).map(|c| ply.get(r, c) as f64).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format_err(path, format!("vertex {r}: non-finite value")));
            }
            if v[3..6].iter().any(|&s| s <= 0.0) {
                return Err(format_err(path, format!("vertex {r}: non-positive scale")));
            }
            let q = Vector4::new(v[6], v[7], v[8], v[9]);
            if q.norm() < 1e-12 {
                return Err(format_err(path, format!("vertex {r}: zero quaternion")));
            }
            if !(0.0..=1.0).contains(&v[10]) {
                return Err(format_err(path, format!("vertex {r}: opacity {}", v[10])));
            }
            // Fields are stored directly (no renormalization) so that
            // write → read → write reproduces the file byte for byte.
            Ok(GaussianPrimitive {
                center: Vector3::new(v[0], v[1], v[2]),
                log_scale: Vector3::new(v[3].ln(), v[4].ln(), v[5].ln()),
                rotation: q,
                opacity_logit: logit(v[10].clamp(1e-9, 1.0 - 1e-9)),
                color: Vector3::new(v[11], v[12], v[13]),
            })
        })
        .collect()
}

/// Writes sparse points as x,y,z with optional reproj_error and RGB columns.
pub fn write_sparse_ply(
    path: &Path,
    points: &SparsePointSet,
    colors: Option<&[Vector3<f64>]>,
    format: PlyFormat,
) -> Result<(), IoError> {
    if let Some(cs) = colors {
        if cs.len() != points.len() {
            return Err(IoError::InvalidInput(format!(
                "{} points but {} colors",
                points.len(),
                cs.len()
            )));
        }
    }
    let mut props: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    if points.reproj_error.is_some() {
        props.push("reproj_error".into());
    }
    if colors.is_some() {
        props.extend(["red".into(), "green".into(), "blue".into()]);
    }
    let mut data = Vec::with_capacity(points.len() * props.len());
    for i in 0..points.len() {
        let p = points.points[i];
        data.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32]);
        if let Some(errs) = &points.reproj_error {
            data.push(errs[i] as f32);
        }
        if let Some(cs) = colors {
            data.extend_from_slice(&[cs[i][0] as f32, cs[i][1] as f32, cs[i][2] as f32]);
        }
    }
    write_ply(path, &PlyData::new(format, props, data)?)
}

pub fn read_sparse_ply(
    path: &Path,
) -> Result<(SparsePointSet, Option<Vec<Vector3<f64>>>), IoError> {
    let ply = read_ply(path)?;
    let (xi, yi, zi) = xyz_columns(path, &ply)?;
    let points: Vec<Vector3<f64>> = (0..ply.vertex_count)
        .map(|r| {
            Vector3::new(
                ply.get(r, xi) as f64,
                ply.get(r, yi) as f64,
                ply.get(r, zi) as f64,
            )
        })
        .collect();
    let reproj = ply.column("reproj_error").map(|c| {
        (0..ply.vertex_count)
            .map(|r| ply.get(r, c) as f64)
            .collect::<Vec<f64>>()
    });
    let colors = match (ply.column("red"), ply.column("green"), ply.column("blue")) {
        (Some(r), Some(g), Some(b)) => Some(
            (0..ply.vertex_count)
                .map(|row| {
                    Vector3::new(
                        ply.get(row, r) as f64,
                        ply.get(row, g) as f64,
                        ply.get(row, b) as f64,
                    )
                })
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let set = SparsePointSet::new(points, reproj).map_err(|e| format_err(path, e.to_string()))?;
    Ok((set, colors))
}

fn xyz_columns(path: &Path, ply: &PlyData) -> Result<(usize, usize, usize), IoError> {
    match (ply.column("x"), ply.column("y"), ply.column("z")) {
        (Some(x), Some(y), Some(z)) => Ok((x, y, z)),
        _ => Err(format_err(path, "missing x/y/z properties")),
    }
}

/// Reads any PLY with x,y,z columns as a point cloud; normals are taken
/// from nx,ny,nz when all three are present. Extra properties are ignored.
pub fn read_point_cloud_ply(path: &Path) -> Result<PointCloud, IoError> {
    let ply = read_ply(path)?;
    let (xi, yi, zi) = xyz_columns(path, &ply)?;
    let points: Vec<Vector3<f64>> = (0..ply.vertex_count)
        .map(|r| {
            Vector3::new(
                ply.get(r, xi) as f64,
                ply.get(r, yi) as f64,
                ply.get(r, zi) as f64,
            )
        })
        .collect();
    let normals = match (ply.column("nx"), ply.column("ny"), ply.column("nz")) {
        (Some(a), Some(b), Some(c)) => Some(
            (0..ply.vertex_count)
                .map(|r| {
                    Vector3::new(
                        ply.get(r, a) as f64,
                        ply.get(r, b) as f64,
                        ply.get(r, c) as f64,
                    )
                })
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    PointCloud::new(points, normals).map_err(|e: EvalError| format_err(path, e.to_string()))
}

pub fn write_point_cloud_ply(
    path: &Path,
    cloud: &PointCloud,
    format: PlyFormat,
) -> Result<(), IoError> {
    let mut props: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    if cloud.normals.is_some() {
        props.extend(["nx".into(), "ny".into(), "nz".into()]);
    }
    let mut data = Vec::with_capacity(cloud.len() * props.len());
    for (i, p) in cloud.points.iter().enumerate() {
        data.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32]);
        if let Some(ns) = &cloud.normals {
            data.extend_from_slice(&[ns[i][0] as f32, ns[i][1] as f32, ns[i][2] as f32]);
        }
    }
    write_ply(path, &PlyData::new(format, props, data)?)
}

/// Writes M3C2 core points with their signed distances (`m3c2_dist`),
/// NaN marking invalid cores, for external color-mapped viewers.
pub fn write_m3c2_ply(
    path: &Path,
    core_points: &[Vector3<f64>],
    distances: &[f64],
    format: PlyFormat,
) -> Result<(), IoError> {
    if core_points.len() != distances.len() {
        return Err(IoError::InvalidInput(format!(
            "{} core points but {} distances",
            core_points.len(),
            distances.len()
        )));
    }
    let props = ["x", "y", "z", "m3c2_dist"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut data = Vec::with_capacity(core_points.len() * 4);
    for (p, d) in core_points.iter().zip(distances) {
        data.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32, *d as f32]);
    }
    write_ply(path, &PlyData::new(format, props, data)?)
}

// ---------------------------------------------------------------------------
// Camera JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraJson {
    /// K, row-major 3×3.
    intrinsics: [f64; 9],
    /// R, row-major 3×3 (world → camera).
    rotation: [f64; 9],
    /// T (world → camera).
    translation: [f64; 3],
    width: u32,
    height: u32,
}

pub fn write_camera_json(path: &Path, cam: &CameraModel) -> Result<(), IoError> {
    let flat = |m: &Matrix3<f64>| {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = m[(r, c)];
            }
        }
        out
    };
    let doc = CameraJson {
        intrinsics: flat(cam.intrinsics()),
        rotation: flat(cam.rotation()),
        translation: [
            cam.translation()[0],
            cam.translation()[1],
            cam.translation()[2],
        ],
        width: cam.width(),
        height: cam.height(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("camera serialization");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_camera_json(path: &Path) -> Result<CameraModel, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: CameraJson =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    let unflat = |m: &[f64; 9]| Matrix3::from_row_slice(m);
    CameraModel::new(
        unflat(&doc.intrinsics),
        unflat(&doc.rotation),
        Vector3::new(doc.translation[0], doc.translation[1], doc.translation[2]),
        doc.width,
        doc.height,
    )
    .map_err(|e| format_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// PNG images
// ---------------------------------------------------------------------------

/// Writes a 3-channel raster as 8-bit RGB, clamping to [0,1].
pub fn write_image_png(path: &Path, raster: &Raster) -> Result<(), IoError> {
    if raster.channels() != 3 {
        return Err(IoError::InvalidInput(format!(
            "PNG output needs 3 channels, got {}",
            raster.channels()
        )));
    }
    let buf: Vec<u8> = raster
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(raster.width() as u32, raster.height() as u32, buf)
        .expect("buffer sized from raster");
    img.save(path).map_err(|e| format_err(path, e.to_string()))
}

/// Reads an 8-bit RGB PNG into a fully valid [0,1] raster.
pub fn read_image_png(path: &Path) -> Result<Raster, IoError> {
    let img = image::open(path)
        .map_err(|e| format_err(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Raster::from_parts(w, h, 3, data, vec![true; w * h])
        .map_err(|e| format_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// History CSV
// ---------------------------------------------------------------------------

const HISTORY_HEADER: &str = "iteration,image_loss,depth_loss,lambda_d,total_loss,psnr_train";

pub fn write_history_csv(path: &Path, history: &[HistoryRecord]) -> Result<(), IoError> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.image_loss, r.depth_loss, r.lambda_d, r.total_loss, r.psnr_train
        ));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(HISTORY_HEADER) {
        return Err(format_err(path, "unexpected CSV header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 6 {
                return Err(format_err(path, format!("line {}: expected 6 fields", i + 2)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| format_err(path, format!("line {}: bad number {s}", i + 2)))
            };
            Ok(HistoryRecord {
                iteration: fields[0]
                    .parse()
                    .map_err(|_| format_err(path, format!("line {}: bad iteration", i + 2)))?,
                image_loss: num(fields[1])?,
                depth_loss: num(fields[2])?,
                lambda_d: num(fields[3])?,
                total_loss: num(fields[4])?,
                psnr_train: num(fields[5])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage sidecars and reports
// ---------------------------------------------------------------------------

/// JSON sidecar written next to each per-view aligned depth map.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AlignSidecar {
    pub scale: f64,
    pub shift: f64,
    pub alignment_loss: f64,
    pub valid_count: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::InvalidInput(format!("serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_align_sidecar(path: &Path, sidecar: &AlignSidecar) -> Result<(), IoError> {
    write_json(path, sidecar)
}

pub fn read_align_sidecar(path: &Path) -> Result<AlignSidecar, IoError> {
    read_json(path)
}

/// One image pair in a 2D evaluation report; PSNR is `null` when infinite
/// (identical images), since JSON has no infinity literal.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImagePairReport {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Eval2dReport {
    pub views: Vec<ImagePairReport>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
}

pub fn write_eval2d_report(path: &Path, report: &Eval2dReport) -> Result<(), IoError> {
    write_json(path, report)
}

pub fn read_eval2d_report(path: &Path) -> Result<Eval2dReport, IoError> {
    read_json(path)
}

/// 3D evaluation report: F-score block plus M3C2 aggregate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Eval3dReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore_percent: f64,
    pub m3c2_rmse: f64,
    pub m3c2_valid_count: usize,
    pub m3c2_core_count: usize,
}

pub fn write_eval3d_report(path: &Path, report: &Eval3dReport) -> Result<(), IoError> {
    write_json(path, report)
}

pub fn read_eval3d_report(path: &Path) -> Result<Eval3dReport, IoError> {
    read_json(path)
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Evaluation settings: F-score threshold (scene-diagonal/500 when unset),
/// the opacity floor for extracting a point cloud from trained Gaussians,
/// optional explicit M3C2 scales (density-derived when unset), and an
/// optional row-major 3×4 affine applied to the reconstructed cloud before
/// comparison (inputs are otherwise assumed pre-registered).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fscore_threshold: Option<f64>,
    pub extraction_opacity: f64,
    pub m3c2: Option<M3c2Params>,
    pub pre_transform: Option<[f64; 12]>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fscore_threshold: None,
            extraction_opacity: 0.5,
            m3c2: None,
            pre_transform: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        if let Some(t) = self.fscore_threshold {
            if !(t > 0.0) || !t.is_finite() {
                return Err(IoError::InvalidInput(format!(
                    "fscore_threshold must be positive, got {t}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.extraction_opacity) {
            return Err(IoError::InvalidInput(format!(
                "extraction_opacity must lie in [0,1], got {}",
                self.extraction_opacity
            )));
        }
        if let Some(m) = &self.m3c2 {
            m.validate().map_err(|e| IoError::InvalidInput(e.to_string()))?;
        }
        if let Some(t) = &self.pre_transform {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(IoError::InvalidInput("non-finite pre_transform".into()));
            }
        }
        Ok(())
    }
}

/// Whole-experiment document: top-level paths and seed plus one section per
/// pipeline stage. Unknown keys are rejected; omitted keys take the stage
/// defaults. A top-level `seed` overrides the training section's seed.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub align: AlignConfig,
    pub confidence: ConfidenceConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Training section with the top-level seed override applied.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        t
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let nest = |e: String| IoError::InvalidInput(e);
        self.align.validate().map_err(|e| nest(e.to_string()))?;
        self.confidence.validate().map_err(|e| nest(e.to_string()))?;
        self.loss.validate().map_err(|e| nest(e.to_string()))?;
        self.train.validate().map_err(|e| nest(e.to_string()))?;
        self.eval.validate()
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_experiment_config(path: &Path, cfg: &ExperimentConfig) -> Result<(), IoError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| IoError::InvalidInput(format!("config serialization: {e}")))?;
    fs::write(path, text).map_err(io_err(path))
}
