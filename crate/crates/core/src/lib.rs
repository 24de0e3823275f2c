//! Appearance editing for mesh-rigged 3D Gaussian head avatars.
//!
//! The pipeline binds Gaussians to a deforming triangle mesh ([`avatar`]),
//! renders them by depth-sorted alpha compositing ([`render`]), bakes
//! multi-view guidance images into one shared UV texture ([`uv`]), and
//! optimizes per-Gaussian color and opacity under masked losses ([`train`])
//! with geometry held fixed. [`guidance`] supplies supervision images and
//! masks, [`metrics`] scores results, [`io`] holds the on-disk formats and
//! [`synth`] builds a procedural test head.

pub mod avatar;
pub mod error;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod par;
pub mod render;
pub mod synth;
pub mod train;
pub mod uv;

pub use error::{Error, Result};
