//! Per-surfel radiance under the unshadowed and shadowed models.
//!
//! Unshadowed: albedo times the quadratic irradiance form of the light about
//! the oriented normal. Shadowed: albedo times the SH dot product of the
//! light with the learned transfer function. Neither carries an explicit
//! 1/pi; the learned light absorbs the constant, and exported environment
//! maps document that scale (the export CLI offers a divide-by-pi flag).
//!
//! Radiance may go negative mid-training because of SH truncation; values
//! are clamped only at image export, never inside the loss path.

use crate::error::Result;
use crate::img::ImageF;
use crate::scene::{effective_transfer, oriented_normal, Camera, Surfel};
use crate::sh::{irradiance_matrix, sh_dot, Direction, EnvLight, ShVector};

/// Linear RGB radiance.
pub type Rgb = [f64; 3];

/// Rec. 709 luma weights used for the grayscale conversion.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Irradiance of the unshadowed (clamped-cosine) model per channel.
pub fn unshadowed_irradiance(normal: Direction, light: &EnvLight) -> Rgb {
    [
        irradiance_matrix(&light.channels[0]).eval(normal),
        irradiance_matrix(&light.channels[1]).eval(normal),
        irradiance_matrix(&light.channels[2]).eval(normal),
    ]
}

/// Irradiance of the shadowed (learned-transfer) model per channel.
pub fn shadowed_irradiance(transfer: &ShVector, light: &EnvLight) -> Rgb {
    [
        sh_dot(&light.channels[0], transfer),
        sh_dot(&light.channels[1], transfer),
        sh_dot(&light.channels[2], transfer),
    ]
}

/// Unshadowed radiance of a surfel: albedo (x) n~^T M(l) n~ with the
/// dual-visibility oriented normal.
pub fn unshadowed_radiance(s: &Surfel, light: &EnvLight, cam: &Camera) -> Rgb {
    let (n, _) = oriented_normal(s, cam);
    let e = unshadowed_irradiance(n, light);
    let rho = s.albedo();
    [rho[0] * e[0], rho[1] * e[1], rho[2] * e[2]]
}

/// Shadowed radiance of a surfel: albedo (x) (l . d) with the transfer
/// point-reflected when the dual-visibility flip is active.
pub fn shadowed_radiance(s: &Surfel, light: &EnvLight, cam: &Camera) -> Rgb {
    let (_, flipped) = oriented_normal(s, cam);
    let d = effective_transfer(s, flipped);
    let e = shadowed_irradiance(&d, light);
    let rho = s.albedo();
    [rho[0] * e[0], rho[1] * e[1], rho[2] * e[2]]
}

/// Shadow visualization: per pixel max(luma(unshadowed - shadowed), 0) over
/// the composited irradiance buffers.
///
/// Irradiance (radiance over albedo) is composited as its own attribute;
/// dividing composited color by composited albedo would be wrong under
/// alpha blending.
pub fn shadow_map(shadowed_irr: &ImageF, unshadowed_irr: &ImageF) -> Result<ImageF> {
    shadowed_irr.assert_shape(unshadowed_irr, "shadow_map")?;
    let mut out = ImageF::zeros(shadowed_irr.width, shadowed_irr.height, 1);
    for y in 0..out.height {
        for x in 0..out.width {
            let s = shadowed_irr.pixel(x, y);
            let u = unshadowed_irr.pixel(x, y);
            let mut luma = 0.0;
            for c in 0..3 {
                luma += LUMA[c] * (u[c] - s[c]);
            }
            out.set(x, y, 0, luma.max(0.0));
        }
    }
    Ok(out)
}
