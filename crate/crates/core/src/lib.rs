//! Cross-LiDAR unsupervised domain adaptation for bird's-eye-view 3D detection.
//!
//! The crate bundles a synthetic dual-LiDAR world ([`sim`]), point-set
//! primitives ([`pointops`]), a small hand-differentiated center-heatmap
//! detector ([`detector`]), per-object geometry and motion features
//! ([`alignment`]), class prototypes with similarity reweighting
//! ([`prototype`]), the self-training orchestration ([`pipeline`]) and the
//! center-distance metrics ([`eval`]).
//!
//! Data-parallel loops (frame rendering, per-sample gradients, evaluation)
//! go through [`par`], which uses rayon when the `parallel` feature is on and
//! falls back to plain iteration otherwise.

pub mod alignment;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod pointops;
pub mod prototype;
pub mod sim;

pub use error::{Error, Result};
