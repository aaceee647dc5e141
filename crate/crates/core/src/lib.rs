//! CPU toolkit for depth-regularized 3D Gaussian splatting.
//!
//! The crate covers the full small-scene pipeline: scene/camera primitives
//! and rasters ([`geom`]), a double-precision EWA splat renderer with an
//! analytic backward pass ([`render`]), affine alignment of monocular depth
//! to sparse geometry ([`align`]), per-pixel confidence maps ([`confidence`]),
//! confidence-weighted losses with adaptive depth weighting ([`loss`]), a
//! deterministic Adam trainer ([`train`]), 2D/3D evaluation metrics
//! ([`eval`]), synthetic scene generation ([`synth`]), and file formats
//! ([`io`]). Everything is seeded and bitwise reproducible at any Rayon
//! thread count.

pub mod align;
pub mod confidence;
pub mod eval;
pub mod geom;
pub mod io;
pub mod loss;
pub mod render;
pub mod spatial;
pub mod synth;
pub mod train;
