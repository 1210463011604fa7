//! Geometric regularizers aligning surfels with surfaces.
//!
//! Normal consistency compares the composited normal buffer against normals
//! recovered from depth-buffer finite differences; depth distortion is the
//! per-ray pairwise depth spread the rasterizer accumulates per pixel. Both
//! are means over the frame so their weights are resolution-independent.

use nalgebra::Vector3;

use crate::rasterizer::RenderOutput;
use crate::scene::Camera;

/// Pixels participate in normal consistency only where the surface is
/// solidly covered, so depth finite differences are meaningful.
pub const COVERAGE_MIN: f64 = 0.5;

/// Gradients of the normal-consistency term with respect to the render
/// buffers it reads.
#[derive(Debug, Clone)]
pub struct NormalConsistencyGrads {
    /// d/d(normal buffer), H*W*3.
    pub d_normal: Vec<f64>,
    /// d/d(depth buffer), H*W.
    pub d_depth: Vec<f64>,
    /// d/d(transmittance buffer), H*W.
    pub d_transmittance: Vec<f64>,
}

struct PixelFrame<'a> {
    out: &'a RenderOutput,
    normal_range: std::ops::Range<usize>,
    cam_rot: nalgebra::Matrix3<f64>,
}

impl PixelFrame<'_> {
    fn coverage(&self, p: usize) -> f64 {
        1.0 - self.out.transmittance[p]
    }

    /// Coverage-normalized depth; callers guarantee coverage above the floor.
    fn zhat(&self, p: usize) -> f64 {
        self.out.depth[p] / self.coverage(p)
    }

    fn normal_world(&self, p: usize) -> Vector3<f64> {
        let base = p * self.out.attr_dim + self.normal_range.start;
        Vector3::new(
            self.out.attrs[base],
            self.out.attrs[base + 1],
            self.out.attrs[base + 2],
        )
    }

    /// Camera-space ray direction of a pixel center (unit z).
    fn pixel_dir(&self, x: usize, y: usize, cam: &Camera) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - cam.cx) / cam.fx,
            (y as f64 + 0.5 - cam.cy) / cam.fy,
            1.0,
        )
    }

    fn rotate_to_cam(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.cam_rot * v
    }
}

/// Normal-consistency term: mean over pixels of
/// `coverage * (1 - n_render . n_depth)` with `n_depth` from central finite
/// differences of the coverage-normalized depth buffer. Returns the value
/// and exact adjoints into the buffers it consumed.
pub fn normal_consistency(
    out: &RenderOutput,
    normal_range: std::ops::Range<usize>,
    cam: &Camera,
) -> (f64, NormalConsistencyGrads) {
    let (w, h) = (out.width, out.height);
    let npx = w * h;
    let frame = PixelFrame {
        out,
        normal_range,
        cam_rot: cam.rotation(),
    };
    let mut grads = NormalConsistencyGrads {
        d_normal: vec![0.0; npx * 3],
        d_depth: vec![0.0; npx],
        d_transmittance: vec![0.0; npx],
    };
    if w < 3 || h < 3 {
        return (0.0, grads);
    }
    let norm = 1.0 / npx as f64;
    let mut total = 0.0;

    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = y * w + x;
            let neighbors = [p - 1, p + 1, p - w, p + w];
            if frame.coverage(p) < COVERAGE_MIN
                || neighbors.iter().any(|&q| frame.coverage(q) < COVERAGE_MIN)
            {
                continue;
            }
            let n_raw = frame.normal_world(p);
            let n_len = n_raw.norm();
            if n_len < 1e-8 {
                continue;
            }
            let n_cam = frame.rotate_to_cam(&n_raw) / n_len;

            // Camera-space points of the four neighbors from normalized depth.
            let v_xm = frame.pixel_dir(x - 1, y, cam);
            let v_xp = frame.pixel_dir(x + 1, y, cam);
            let v_ym = frame.pixel_dir(x, y - 1, cam);
            let v_yp = frame.pixel_dir(x, y + 1, cam);
            let z_xm = frame.zhat(p - 1);
            let z_xp = frame.zhat(p + 1);
            let z_ym = frame.zhat(p - w);
            let z_yp = frame.zhat(p + w);
            let dpdx = v_xp * z_xp - v_xm * z_xm;
            let dpdy = v_yp * z_yp - v_ym * z_ym;
            let cross = dpdx.cross(&dpdy);
            let c_len = cross.norm();
            if c_len < 1e-12 {
                continue;
            }
            let n_depth = -cross / c_len;

            let cov = frame.coverage(p);
            let align = n_cam.dot(&n_depth);
            total += cov * (1.0 - align);

            // --- adjoints ---
            // d/d coverage at the center pixel (coverage = 1 - T).
            grads.d_transmittance[p] += -(1.0 - align) * norm;

            // d/d n_cam through the normalization of the raw buffer normal.
            let d_ncam = n_depth * (-cov * norm);
            let d_nraw_cam = (d_ncam - n_cam * n_cam.dot(&d_ncam)) / n_len;
            let d_nraw = frame.cam_rot.transpose() * d_nraw_cam;
            for k in 0..3 {
                grads.d_normal[p * 3 + k] += d_nraw[k];
            }

            // d/d n_depth -> cross product -> neighbor depths.
            let d_ndepth = n_cam * (-cov * norm);
            let d_cross = -(d_ndepth - n_depth * n_depth.dot(&d_ndepth)) / c_len;
            let d_dpdx = dpdy.cross(&d_cross);
            let d_dpdy = d_cross.cross(&dpdx);
            for (q, v, sign, d_vec) in [
                (p + 1, v_xp, 1.0, d_dpdx),
                (p - 1, v_xm, -1.0, d_dpdx),
                (p + w, v_yp, 1.0, d_dpdy),
                (p - w, v_ym, -1.0, d_dpdy),
            ] {
                let d_zhat = sign * v.dot(&d_vec);
                let cov_q = frame.coverage(q);
                grads.d_depth[q] += d_zhat / cov_q;
                // zhat = D / (1 - T): d zhat / dT = zhat / coverage.
                grads.d_transmittance[q] += d_zhat * frame.zhat(q) / cov_q;
            }
        }
    }
    (total * norm, grads)
}

/// Depth distortion: mean per pixel of the rasterizer's pairwise
/// `w_i w_j |z_i - z_j|` accumulator. The gradient to feed back is a
/// constant `weight / npixels` per pixel of the distortion buffer.
pub fn depth_distortion(out: &RenderOutput) -> f64 {
    let npx = (out.width * out.height) as f64;
    out.distortion.iter().sum::<f64>() / npx
}
