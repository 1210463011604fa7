//! Brute-force splatting reference.
//!
//! A deliberately simple renderer that loops every surfel at every pixel
//! with no tiling, culling, or cached geometry. It exists solely as the
//! correctness oracle for the tiled renderer and for the per-ray fragment
//! oracles used by the loss tests; keep it independent of the production
//! traversal code.

use nalgebra::Vector3;

use crate::error::Result;
use crate::scene::{Camera, Surfel};

use super::RenderOptions;

/// One composited fragment on a ray: (surfel index, weight, depth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayFragment {
    pub surfel: usize,
    pub weight: f64,
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub width: usize,
    pub height: usize,
    pub attr_dim: usize,
    pub attrs: Vec<f64>,
    pub depth: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub distortion: Vec<f64>,
    /// Every composited fragment per pixel, in compositing order.
    pub fragments: Vec<Vec<RayFragment>>,
}

/// Render by looping all surfels per pixel in global mean-depth order.
pub fn render(
    surfels: &[Surfel],
    attrs: &[f64],
    attr_dim: usize,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<ReferenceOutput> {
    cam.validate()?;
    assert_eq!(attrs.len(), surfels.len() * attr_dim);
    let width = cam.width as usize;
    let height = cam.height as usize;
    let origin = cam.position();

    // Global order: mean camera-z ascending, ties by index; skip surfels
    // whose mean sits at or behind the near plane.
    let mut order: Vec<usize> = Vec::new();
    let mut mean_z = vec![0.0f64; surfels.len()];
    for (i, s) in surfels.iter().enumerate() {
        let z = cam.to_camera(&s.position).z;
        mean_z[i] = z;
        if z > opts.near {
            order.push(i);
        }
    }
    order.sort_by(|&a, &b| mean_z[a].total_cmp(&mean_z[b]).then(a.cmp(&b)));

    let npx = width * height;
    let mut out = ReferenceOutput {
        width,
        height,
        attr_dim,
        attrs: vec![0.0; npx * attr_dim],
        depth: vec![0.0; npx],
        transmittance: vec![1.0; npx],
        distortion: vec![0.0; npx],
        fragments: vec![Vec::new(); npx],
    };

    let sigma2 = opts.filter_std_px * opts.filter_std_px;
    for iy in 0..height {
        for ix in 0..width {
            let p = iy * width + ix;
            let px = ix as f64 + 0.5;
            let py = iy as f64 + 0.5;
            let dir = cam.pixel_ray(px, py);
            let mut transmittance = 1.0;
            for &si in &order {
                if transmittance < opts.transmittance_floor {
                    break;
                }
                let s = &surfels[si];
                let rot = s.rotation_matrix();
                let r1: Vector3<f64> = rot.column(0).into();
                let r2: Vector3<f64> = rot.column(1).into();
                let normal: Vector3<f64> = rot.column(2).into();
                let [su, sv] = s.scale();

                let denom = dir.dot(&normal);
                let mut g_obj = 0.0;
                let mut tstar = 0.0;
                let mut intersects = false;
                if denom.abs() >= 1e-12 {
                    let t = (s.position - origin).dot(&normal) / denom;
                    if t > opts.near {
                        let x = origin + dir * t;
                        let a = (x - s.position).dot(&r1) / su;
                        let b = (x - s.position).dot(&r2) / sv;
                        g_obj = (-(a * a + b * b) / 2.0).exp();
                        tstar = t;
                        intersects = true;
                    }
                }
                let p_cam = cam.to_camera(&s.position);
                let (mx, my) = cam.project_cam(&p_cam);
                let (dx, dy) = (px - mx, py - my);
                let g_scr = (-(dx * dx + dy * dy) / (2.0 * sigma2)).exp();
                let gauss = if intersects && g_obj >= g_scr {
                    g_obj
                } else {
                    g_scr
                };
                if gauss < opts.gaussian_cutoff {
                    continue;
                }
                let z = if intersects { tstar } else { mean_z[si] };

                let alpha = s.opacity() * gauss;
                let w = alpha * transmittance;
                for d in 0..attr_dim {
                    out.attrs[p * attr_dim + d] += w * attrs[si * attr_dim + d];
                }
                out.depth[p] += w * z;
                for prev in &out.fragments[p] {
                    out.distortion[p] += w * prev.weight * (z - prev.depth).abs();
                }
                out.fragments[p].push(RayFragment {
                    surfel: si,
                    weight: w,
                    depth: z,
                });
                transmittance *= 1.0 - alpha;
            }
            out.transmittance[p] = transmittance;
        }
    }
    Ok(out)
}
