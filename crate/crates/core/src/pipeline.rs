//! Full-frame render passes composing the scene, lighting, and rasterizer.
//!
//! One splatting pass composites every attribute the trainer and the CLI
//! need: shadowed and unshadowed radiance, albedo, oriented normal, and
//! both irradiance variants. The shading backward maps buffer gradients
//! back onto albedo logits, transfer coefficients, rotations, and the
//! environment light.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::img::ImageF;
use crate::lighting::{self, Rgb};
use crate::quat;
use crate::rasterizer::{self, RenderOptions, RenderOutput};
use crate::scene::{effective_transfer, oriented_normal, Camera, Surfel};
use crate::sh::{
    clamped_cosine_coeffs, irradiance_matrix, sh_dot, Direction, EnvLight, IrradianceMatrix,
    ShVector, SH_COEFFS,
};
use crate::util::sigmoid_grad_from_output;

/// Channel layout of the training attribute matrix.
pub mod channels {
    use std::ops::Range;

    pub const SHADOWED: Range<usize> = 0..3;
    pub const UNSHADOWED: Range<usize> = 3..6;
    pub const ALBEDO: Range<usize> = 6..9;
    pub const NORMAL: Range<usize> = 9..12;
    pub const IRR_SHADOWED: Range<usize> = 12..15;
    pub const IRR_UNSHADOWED: Range<usize> = 15..18;
    pub const DIM: usize = 18;
}

/// Per-surfel shading state for one (scene, light, camera) triple.
#[derive(Debug, Clone)]
pub struct SurfelShading {
    pub normal: Vec<Direction>,
    pub flipped: Vec<bool>,
    pub albedo: Vec<[f64; 3]>,
    pub irr_shadowed: Vec<Rgb>,
    pub irr_unshadowed: Vec<Rgb>,
    pub radiance_shadowed: Vec<Rgb>,
    pub radiance_unshadowed: Vec<Rgb>,
}

/// Evaluate both lighting models for every surfel.
pub fn shade_surfels(surfels: &[Surfel], light: &EnvLight, cam: &Camera) -> SurfelShading {
    let matrices: [IrradianceMatrix; 3] = [
        irradiance_matrix(&light.channels[0]),
        irradiance_matrix(&light.channels[1]),
        irradiance_matrix(&light.channels[2]),
    ];
    let n = surfels.len();
    let mut shading = SurfelShading {
        normal: Vec::with_capacity(n),
        flipped: Vec::with_capacity(n),
        albedo: Vec::with_capacity(n),
        irr_shadowed: Vec::with_capacity(n),
        irr_unshadowed: Vec::with_capacity(n),
        radiance_shadowed: Vec::with_capacity(n),
        radiance_unshadowed: Vec::with_capacity(n),
    };
    for s in surfels {
        let (normal, flipped) = oriented_normal(s, cam);
        let transfer = effective_transfer(s, flipped);
        let rho = s.albedo();
        let mut irr_sh = [0.0; 3];
        let mut irr_unsh = [0.0; 3];
        let mut rad_sh = [0.0; 3];
        let mut rad_unsh = [0.0; 3];
        for ch in 0..3 {
            irr_sh[ch] = sh_dot(&light.channels[ch], &transfer);
            irr_unsh[ch] = matrices[ch].eval(normal);
            rad_sh[ch] = rho[ch] * irr_sh[ch];
            rad_unsh[ch] = rho[ch] * irr_unsh[ch];
        }
        shading.normal.push(normal);
        shading.flipped.push(flipped);
        shading.albedo.push(rho);
        shading.irr_shadowed.push(irr_sh);
        shading.irr_unshadowed.push(irr_unsh);
        shading.radiance_shadowed.push(rad_sh);
        shading.radiance_unshadowed.push(rad_unsh);
    }
    shading
}

/// Pack the shading into the rasterizer attribute matrix (K x DIM).
pub fn shading_attrs(shading: &SurfelShading) -> Vec<f64> {
    let n = shading.normal.len();
    let mut attrs = vec![0.0; n * channels::DIM];
    for k in 0..n {
        let row = &mut attrs[k * channels::DIM..(k + 1) * channels::DIM];
        for ch in 0..3 {
            row[channels::SHADOWED.start + ch] = shading.radiance_shadowed[k][ch];
            row[channels::UNSHADOWED.start + ch] = shading.radiance_unshadowed[k][ch];
            row[channels::ALBEDO.start + ch] = shading.albedo[k][ch];
            row[channels::NORMAL.start + ch] = shading.normal[k][ch];
            row[channels::IRR_SHADOWED.start + ch] = shading.irr_shadowed[k][ch];
            row[channels::IRR_UNSHADOWED.start + ch] = shading.irr_unshadowed[k][ch];
        }
    }
    attrs
}

/// One full training-style forward pass.
pub fn training_forward(
    surfels: &[Surfel],
    light: &EnvLight,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<(SurfelShading, Vec<f64>, RenderOutput)> {
    let shading = shade_surfels(surfels, light, cam);
    let attrs = shading_attrs(&shading);
    let output = rasterizer::render(surfels, &attrs, channels::DIM, cam, opts)?;
    Ok((shading, attrs, output))
}

/// Gradients produced by [`shading_backward`].
#[derive(Debug, Clone)]
pub struct ShadingGrads {
    pub d_albedo_param: Vec<[f64; 3]>,
    pub d_transfer: Vec<[f64; SH_COEFFS]>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_light: EnvLight,
}

/// Map attribute-row gradients (from the rasterizer backward) plus direct
/// per-surfel radiance gradients (from the shadow-only loss) onto shading
/// parameters and the light.
pub fn shading_backward(
    surfels: &[Surfel],
    light: &EnvLight,
    shading: &SurfelShading,
    d_attr_rows: &[f64],
    d_radiance_shadowed: &[Rgb],
    d_radiance_unshadowed: &[Rgb],
) -> ShadingGrads {
    let n = surfels.len();
    let matrices: [IrradianceMatrix; 3] = [
        irradiance_matrix(&light.channels[0]),
        irradiance_matrix(&light.channels[1]),
        irradiance_matrix(&light.channels[2]),
    ];
    let mut grads = ShadingGrads {
        d_albedo_param: vec![[0.0; 3]; n],
        d_transfer: vec![[0.0; SH_COEFFS]; n],
        d_rotation: vec![[0.0; 4]; n],
        d_light: EnvLight::zero(),
    };

    for k in 0..n {
        let row = &d_attr_rows[k * channels::DIM..(k + 1) * channels::DIM];
        let rho = shading.albedo[k];
        let normal = shading.normal[k];
        let flipped = shading.flipped[k];
        let transfer_eff = effective_transfer(&surfels[k], flipped);
        // The clamped-cosine lobe about the oriented normal doubles as the
        // per-coefficient sensitivity of the unshadowed irradiance to the
        // light (bridge identity).
        let cc = clamped_cosine_coeffs(normal);

        let mut d_rho = [0.0; 3];
        let mut d_irr_sh = [0.0; 3];
        let mut d_irr_unsh = [0.0; 3];
        let mut d_normal = Vector3::zeros();

        for ch in 0..3 {
            let d_rad_sh = row[channels::SHADOWED.start + ch] + d_radiance_shadowed[k][ch];
            let d_rad_unsh = row[channels::UNSHADOWED.start + ch] + d_radiance_unshadowed[k][ch];
            d_rho[ch] += d_rad_sh * shading.irr_shadowed[k][ch]
                + d_rad_unsh * shading.irr_unshadowed[k][ch];
            d_irr_sh[ch] += d_rad_sh * rho[ch] + row[channels::IRR_SHADOWED.start + ch];
            d_irr_unsh[ch] += d_rad_unsh * rho[ch] + row[channels::IRR_UNSHADOWED.start + ch];
            d_rho[ch] += row[channels::ALBEDO.start + ch];
        }

        for ch in 0..3 {
            // Shadowed irradiance = <light, transfer_eff>.
            if d_irr_sh[ch] != 0.0 {
                for i in 0..SH_COEFFS {
                    grads.d_light.channels[ch].coeffs[i] +=
                        d_irr_sh[ch] * transfer_eff.coeffs[i];
                }
                let mut d_te = [0.0; SH_COEFFS];
                for i in 0..SH_COEFFS {
                    d_te[i] = d_irr_sh[ch] * light.channels[ch].coeffs[i];
                }
                // Point reflection is linear and self-adjoint per band.
                let d_t = if flipped {
                    ShVector::new(d_te).point_reflected().coeffs
                } else {
                    d_te
                };
                for i in 0..SH_COEFFS {
                    grads.d_transfer[k][i] += d_t[i];
                }
            }
            // Unshadowed irradiance = n~^T M(light) n~.
            if d_irr_unsh[ch] != 0.0 {
                for i in 0..SH_COEFFS {
                    grads.d_light.channels[ch].coeffs[i] += d_irr_unsh[ch] * cc.coeffs[i];
                }
                d_normal += matrices[ch].eval_grad(normal) * d_irr_unsh[ch];
            }
        }

        // Composited normal channels.
        d_normal += Vector3::new(
            row[channels::NORMAL.start],
            row[channels::NORMAL.start + 1],
            row[channels::NORMAL.start + 2],
        );

        for ch in 0..3 {
            grads.d_albedo_param[k][ch] = d_rho[ch] * sigmoid_grad_from_output(rho[ch]);
        }

        // Oriented normal is (+-) the third rotation column.
        let sign = if flipped { -1.0 } else { 1.0 };
        let dq = quat::backprop_column_grads(
            &surfels[k].rotation,
            &Vector3::zeros(),
            &Vector3::zeros(),
            &(d_normal * sign),
        );
        for c in 0..4 {
            grads.d_rotation[k][c] += dq[c];
        }
    }
    grads
}

/// Lighting model selector for plain (non-training) renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadingModel {
    Shadowed,
    Unshadowed,
}

/// Multi-channel float buffers from one splatting pass.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub color: ImageF,
    pub albedo: ImageF,
    pub normal: ImageF,
    pub depth: ImageF,
    pub irradiance: ImageF,
    pub transmittance: ImageF,
}

fn split_buffers(out: &RenderOutput, model: ShadingModel) -> RenderBuffers {
    let (color_r, irr_r) = match model {
        ShadingModel::Shadowed => (channels::SHADOWED, channels::IRR_SHADOWED),
        ShadingModel::Unshadowed => (channels::UNSHADOWED, channels::IRR_UNSHADOWED),
    };
    RenderBuffers {
        color: out.attr_image(color_r),
        albedo: out.attr_image(channels::ALBEDO),
        normal: out.attr_image(channels::NORMAL),
        depth: out.depth_image(),
        irradiance: out.attr_image(irr_r),
        transmittance: out.transmittance_image(),
    }
}

/// Render the scene under a light with the chosen model.
pub fn render_scene(
    surfels: &[Surfel],
    light: &EnvLight,
    cam: &Camera,
    opts: &RenderOptions,
    model: ShadingModel,
) -> Result<RenderBuffers> {
    let (_, _, out) = training_forward(surfels, light, cam, opts)?;
    Ok(split_buffers(&out, model))
}

/// Outputs of a relighting pass: shadowed-model buffers plus the
/// unshadowed/shadowed irradiance difference map.
#[derive(Debug, Clone)]
pub struct RelightRender {
    pub buffers: RenderBuffers,
    pub unshadowed: RenderBuffers,
    pub shadow_map: ImageF,
}

/// Re-render under an arbitrary light, optionally rotated.
pub fn relight(
    surfels: &[Surfel],
    light: &EnvLight,
    rotation: Option<&Matrix3<f64>>,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RelightRender> {
    let light = match rotation {
        Some(rot) => light.rotated(rot)?,
        None => *light,
    };
    let (_, _, out) = training_forward(surfels, &light, cam, opts)?;
    let shadowed = split_buffers(&out, ShadingModel::Shadowed);
    let unshadowed = split_buffers(&out, ShadingModel::Unshadowed);
    let shadow_map = lighting::shadow_map(&shadowed.irradiance, &unshadowed.irradiance)?;
    Ok(RelightRender {
        buffers: shadowed,
        unshadowed,
        shadow_map,
    })
}

/// Rotation about the world up axis (z), in degrees; used by the relight
/// CLI for the rotated-environment experiment.
pub fn azimuth_rotation(degrees: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), degrees.to_radians()).into_inner()
}
