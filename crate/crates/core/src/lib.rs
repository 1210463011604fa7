//! Relightable outdoor scene reconstruction from posed photographs.
//!
//! The scene is modeled as a set of flat 2D Gaussian surfels carrying albedo
//! and a per-surfel radiance-transfer function in degree-2 spherical
//! harmonics. Per-image environment light is predicted by a small MLP from
//! learned latent codes. A software rasterizer splats surfel attributes into
//! image buffers with exact ray/surfel-plane intersection, and hand-derived
//! adjoints drive an Adam-based two-stage training loop. Trained scenes can
//! be re-rendered under arbitrary (possibly rotated) environment maps.
//!
//! Module map:
//! - [`sh`]: real spherical-harmonics math (basis, projection, rotation,
//!   clamped-cosine lobes, the quadratic irradiance form, dot products).
//! - [`scene`]: surfels, cameras, the latent-code + MLP light model.
//! - [`rasterizer`]: tiled differentiable splatting, plus a brute-force
//!   reference renderer used as a correctness oracle.
//! - [`lighting`]: shadowed/unshadowed per-surfel radiance and shadow maps.
//! - [`losses`]: photometric (L1 + D-SSIM), physical-constraint regularizers
//!   with Monte-Carlo estimation, and the 2DGS geometric regularizers.
//! - [`trainer`]: Adam parameter groups, two-stage schedule, adaptive
//!   density control, bit-exact checkpointing.
//! - [`metrics`]: masked MSE/MAE/PSNR/SSIM evaluation protocol.
//! - [`io`]: PFM/PNG image I/O, dataset ingestion, scene serialization.
//! - [`pipeline`]: full-frame render passes composing the modules above.
//! - [`fixture`]: synthetic dataset generator used by the end-to-end tests.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod fixture;
pub mod img;
pub mod io;
pub mod lighting;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod trainer;
pub mod util;

mod quat;

pub use error::{Error, Result};
