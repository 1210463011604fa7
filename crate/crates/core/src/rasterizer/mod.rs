//! Software splatting renderer for 2D Gaussian surfels.
//!
//! Surfels are composited front-to-back in global mean-depth order with
//! per-pixel weights from exact ray/surfel-plane intersection. The forward
//! pass bins surfels into screen tiles by conservative projected bounding
//! boxes; the backward pass replays the retained per-pixel fragment lists
//! and produces exact adjoints of the compositing formula for every surfel
//! parameter and attribute.
//!
//! [`reference`] holds a deliberately simple brute-force renderer used as
//! the correctness oracle; it shares only the fragment contract, not the
//! traversal code.

pub mod reference;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::ImageF;
use crate::quat;
use crate::scene::{Camera, Surfel};

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Minimum camera-z; surfels (and intersections) at or behind are skipped.
    pub near: f64,
    /// Fragments with Gaussian weight below this never composite.
    pub gaussian_cutoff: f64,
    /// Front-to-back compositing stops once transmittance drops below this.
    pub transmittance_floor: f64,
    /// Std-dev (pixels) of the object-space low-pass screen filter.
    pub filter_std_px: f64,
    /// Keep per-pixel fragment lists so `backward` can run.
    pub retain_fragments: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: 16,
            near: 1e-4,
            gaussian_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            filter_std_px: 0.5,
            retain_fragments: false,
        }
    }
}

/// Per-surfel quantities fixed for one (scene, camera) pair.
#[derive(Debug, Clone)]
struct SurfelGeom {
    r1: Vector3<f64>,
    r2: Vector3<f64>,
    normal: Vector3<f64>,
    su: f64,
    sv: f64,
    opacity: f64,
    mean: Vector3<f64>,
    mean_z: f64,
    mean_px: [f64; 2],
    /// (mean - origin) . normal, numerator of the plane intersection.
    plane_dot: f64,
    /// Camera-z is above `near`; behind-camera surfels never render.
    visible: bool,
}

/// One composited fragment, recomputed identically in forward and backward.
#[derive(Debug, Clone, Copy)]
struct Fragment {
    alpha: f64,
    gauss: f64,
    /// Object-space branch won the low-pass max.
    object_branch: bool,
    /// Depth written to the buffer; the exact intersection when one exists.
    z: f64,
    z_from_intersection: bool,
    tstar: f64,
    a: f64,
    b: f64,
    denom: f64,
}

fn compute_geoms(
    surfels: &[Surfel],
    cam: &Camera,
    origin: &Vector3<f64>,
    near: f64,
) -> Vec<SurfelGeom> {
    surfels
        .iter()
        .map(|s| {
            let rot = s.rotation_matrix();
            let r1: Vector3<f64> = rot.column(0).into();
            let r2: Vector3<f64> = rot.column(1).into();
            let normal: Vector3<f64> = rot.column(2).into();
            let [su, sv] = s.scale();
            let mean = s.position;
            let p_cam = cam.to_camera(&mean);
            let visible = p_cam.z > near;
            let mean_px = if visible {
                let (px, py) = cam.project_cam(&p_cam);
                [px, py]
            } else {
                [0.0, 0.0]
            };
            SurfelGeom {
                r1,
                r2,
                normal,
                su,
                sv,
                opacity: s.opacity(),
                mean,
                mean_z: p_cam.z,
                mean_px,
                plane_dot: (mean - origin).dot(&normal),
                visible,
            }
        })
        .collect()
}

/// Global compositing order: mean camera-z ascending, ties by surfel index.
fn sorted_order(geoms: &[SurfelGeom]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..geoms.len() as u32)
        .filter(|&i| geoms[i as usize].visible)
        .collect();
    order.sort_by(|&a, &b| {
        geoms[a as usize]
            .mean_z
            .total_cmp(&geoms[b as usize].mean_z)
            .then(a.cmp(&b))
    });
    order
}

/// Evaluate the fragment contract for one (surfel, pixel-ray) pair.
///
/// `dir` is scaled so the camera-z depth along the ray equals the ray
/// parameter. The Gaussian weight is the max of the exact plane-intersection
/// Gaussian and a minimal screen-space Gaussian around the projected mean
/// (anti-aliasing for sub-pixel surfels). Returns `None` below the cutoff.
#[inline]
fn make_fragment(
    g: &SurfelGeom,
    dir: &Vector3<f64>,
    origin: &Vector3<f64>,
    px: f64,
    py: f64,
    opts: &RenderOptions,
) -> Option<Fragment> {
    let denom = dir.dot(&g.normal);
    let mut tstar = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g_obj = 0.0;
    let mut intersects = false;
    if denom.abs() >= 1e-12 {
        let t = g.plane_dot / denom;
        if t > opts.near {
            let x = origin + dir * t;
            let off = x - g.mean;
            a = off.dot(&g.r1) / g.su;
            b = off.dot(&g.r2) / g.sv;
            g_obj = (-(a * a + b * b) / 2.0).exp();
            tstar = t;
            intersects = true;
        }
    }
    let dx = px - g.mean_px[0];
    let dy = py - g.mean_px[1];
    let sigma2 = opts.filter_std_px * opts.filter_std_px;
    let g_scr = (-(dx * dx + dy * dy) / (2.0 * sigma2)).exp();

    let (gauss, object_branch) = if intersects && g_obj >= g_scr {
        (g_obj, true)
    } else {
        (g_scr, false)
    };
    if gauss < opts.gaussian_cutoff {
        return None;
    }
    let (z, z_from_intersection) = if intersects {
        (tstar, true)
    } else {
        (g.mean_z, false)
    };
    Some(Fragment {
        alpha: g.opacity * gauss,
        gauss,
        object_branch,
        z,
        z_from_intersection,
        tstar,
        a,
        b,
        denom,
    })
}

/// Conservative pixel bounds of a surfel's contribution region, or `None`
/// for a full-screen fallback (some corner behind the near plane).
fn surfel_pixel_bounds(
    g: &SurfelGeom,
    cam: &Camera,
    cutoff_radius: f64,
    scr_radius: f64,
) -> Option<(i64, i64, i64, i64)> {
    let mut min_x = g.mean_px[0] - scr_radius;
    let mut max_x = g.mean_px[0] + scr_radius;
    let mut min_y = g.mean_px[1] - scr_radius;
    let mut max_y = g.mean_px[1] + scr_radius;
    let eu = g.r1 * (g.su * cutoff_radius);
    let ev = g.r2 * (g.sv * cutoff_radius);
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let corner = g.mean + eu * sx + ev * sy;
        let p_cam = cam.to_camera(&corner);
        if p_cam.z <= 1e-6 {
            return None;
        }
        let (px, py) = cam.project_cam(&p_cam);
        min_x = min_x.min(px);
        max_x = max_x.max(px);
        min_y = min_y.min(py);
        max_y = max_y.max(py);
    }
    Some((
        (min_x.floor() as i64) - 1,
        (min_y.floor() as i64) - 1,
        (max_x.ceil() as i64) + 1,
        (max_y.ceil() as i64) + 1,
    ))
}

#[derive(Debug, Clone)]
struct FragmentLists {
    /// Composited surfel indices per pixel, flattened.
    ids: Vec<u32>,
    /// (start, len) into `ids` per pixel.
    ranges: Vec<(u32, u32)>,
}

/// Buffers produced by one splatting pass. `attrs` holds whatever per-surfel
/// attribute vectors the caller supplied, composited with identical weights;
/// `distortion` is the per-ray pairwise depth spread used by the geometric
/// regularizer.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub attr_dim: usize,
    pub attrs: Vec<f64>,
    pub depth: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub distortion: Vec<f64>,
    fragments: Option<FragmentLists>,
    fingerprint: u64,
}

impl RenderOutput {
    /// Extract a channel range of the attribute buffer as an image.
    pub fn attr_image(&self, channels: std::ops::Range<usize>) -> ImageF {
        let n = channels.len();
        let mut img = ImageF::zeros(self.width, self.height, n);
        for p in 0..self.width * self.height {
            for (ci, c) in channels.clone().enumerate() {
                img.data[p * n + ci] = self.attrs[p * self.attr_dim + c];
            }
        }
        img
    }

    pub fn depth_image(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.depth.clone(),
        }
    }

    pub fn transmittance_image(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.transmittance.clone(),
        }
    }
}

fn scene_fingerprint(surfels: &[Surfel], attrs: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x1000_0000_01b3).rotate_left(7);
    };
    for s in surfels {
        for i in 0..3 {
            mix(s.position[i]);
        }
        for c in s.rotation {
            mix(c);
        }
        for c in s.log_scale {
            mix(c);
        }
        mix(s.opacity_logit);
    }
    for &v in attrs {
        mix(v);
    }
    h ^ (surfels.len() as u64)
}

struct TileResult {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    attrs: Vec<f64>,
    depth: Vec<f64>,
    trans: Vec<f64>,
    dist: Vec<f64>,
    frag_ids: Vec<u32>,
    frag_ranges: Vec<(u32, u32)>,
}

/// Splat per-surfel attribute vectors into image buffers.
///
/// `attrs` is row-major `surfels.len() x attr_dim`. Each composited fragment
/// contributes `attr * o * G * prod_j (1 - o_j G_j)` with the product over
/// nearer fragments of the same ray; color buffers therefore composite over
/// black, and `transmittance` lets callers substitute any background.
pub fn render(
    surfels: &[Surfel],
    attrs: &[f64],
    attr_dim: usize,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    cam.validate()?;
    if attrs.len() != surfels.len() * attr_dim {
        return Err(Error::contract(format!(
            "attribute matrix has {} values, expected {} x {}",
            attrs.len(),
            surfels.len(),
            attr_dim
        )));
    }
    let width = cam.width as usize;
    let height = cam.height as usize;
    let origin = cam.position();
    let geoms = compute_geoms(surfels, cam, &origin, opts.near);
    let order = sorted_order(&geoms);

    // Bin surfels into tiles in global order so tile lists stay sorted.
    let tile = opts.tile_size.max(1);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let cutoff_radius = (-2.0 * opts.gaussian_cutoff.ln()).sqrt();
    let scr_radius = cutoff_radius * opts.filter_std_px + 1.0;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &si in &order {
        let g = &geoms[si as usize];
        let (bx0, by0, bx1, by1) = match surfel_pixel_bounds(g, cam, cutoff_radius, scr_radius) {
            Some(b) => b,
            None => (0, 0, width as i64, height as i64),
        };
        if bx1 < 0 || by1 < 0 || bx0 >= width as i64 || by0 >= height as i64 {
            continue;
        }
        let tx0 = (bx0.max(0) as usize) / tile;
        let ty0 = (by0.max(0) as usize) / tile;
        let tx1 = ((bx1.min(width as i64 - 1)).max(0) as usize) / tile;
        let ty1 = ((by1.min(height as i64 - 1)).max(0) as usize) / tile;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(si);
            }
        }
    }

    let tile_results: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let x1 = (x0 + tile).min(width);
            let y1 = (y0 + tile).min(height);
            let npx = (x1 - x0) * (y1 - y0);
            let mut res = TileResult {
                x0,
                y0,
                x1,
                y1,
                attrs: vec![0.0; npx * attr_dim],
                depth: vec![0.0; npx],
                trans: vec![1.0; npx],
                dist: vec![0.0; npx],
                frag_ids: Vec::new(),
                frag_ranges: vec![(0, 0); if opts.retain_fragments { npx } else { 0 }],
            };
            let candidates = &bins[ti];
            let mut composited: Vec<(f64, f64)> = Vec::with_capacity(32);
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let px = ix as f64 + 0.5;
                    let py = iy as f64 + 0.5;
                    let dir = cam.pixel_ray(px, py);
                    let local = (iy - y0) * (x1 - x0) + (ix - x0);
                    let frag_start = res.frag_ids.len();
                    let mut transmittance = 1.0;
                    composited.clear();
                    for &si in candidates {
                        if transmittance < opts.transmittance_floor {
                            break;
                        }
                        let g = &geoms[si as usize];
                        let Some(frag) = make_fragment(g, &dir, &origin, px, py, opts) else {
                            continue;
                        };
                        let w = frag.alpha * transmittance;
                        let base = si as usize * attr_dim;
                        for d in 0..attr_dim {
                            res.attrs[local * attr_dim + d] += w * attrs[base + d];
                        }
                        res.depth[local] += w * frag.z;
                        for &(wj, zj) in &composited {
                            res.dist[local] += w * wj * (frag.z - zj).abs();
                        }
                        composited.push((w, frag.z));
                        transmittance *= 1.0 - frag.alpha;
                        if opts.retain_fragments {
                            res.frag_ids.push(si);
                        }
                    }
                    res.trans[local] = transmittance;
                    if opts.retain_fragments {
                        res.frag_ranges[local] =
                            (frag_start as u32, (res.frag_ids.len() - frag_start) as u32);
                    }
                }
            }
            res
        })
        .collect();

    // Blit tiles into the full-frame buffers (sequential, in tile order).
    let npx = width * height;
    let mut out = RenderOutput {
        width,
        height,
        attr_dim,
        attrs: vec![0.0; npx * attr_dim],
        depth: vec![0.0; npx],
        transmittance: vec![1.0; npx],
        distortion: vec![0.0; npx],
        fragments: None,
        fingerprint: scene_fingerprint(surfels, attrs),
    };
    let mut frag_lists = if opts.retain_fragments {
        Some(FragmentLists {
            ids: Vec::new(),
            ranges: vec![(0, 0); npx],
        })
    } else {
        None
    };
    for tr in tile_results {
        let tw = tr.x1 - tr.x0;
        for iy in tr.y0..tr.y1 {
            for ix in tr.x0..tr.x1 {
                let local = (iy - tr.y0) * tw + (ix - tr.x0);
                let p = iy * width + ix;
                for d in 0..attr_dim {
                    out.attrs[p * attr_dim + d] = tr.attrs[local * attr_dim + d];
                }
                out.depth[p] = tr.depth[local];
                out.transmittance[p] = tr.trans[local];
                out.distortion[p] = tr.dist[local];
                if let Some(fl) = frag_lists.as_mut() {
                    let (start, len) = tr.frag_ranges[local];
                    let global_start = fl.ids.len() as u32;
                    fl.ids
                        .extend_from_slice(&tr.frag_ids[start as usize..(start + len) as usize]);
                    fl.ranges[p] = (global_start, len);
                }
            }
        }
    }
    out.fragments = frag_lists;
    Ok(out)
}

/// Upstream gradients for [`backward`]; any buffer may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrads<'a> {
    pub d_attrs: Option<&'a [f64]>,
    pub d_depth: Option<&'a [f64]>,
    pub d_transmittance: Option<&'a [f64]>,
    pub d_distortion: Option<&'a [f64]>,
}

/// Adjoints of [`render`] with respect to surfel parameters and attributes.
#[derive(Debug, Clone)]
pub struct RasterGrads {
    pub d_attrs: Vec<f64>,
    pub d_position: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_log_scale: Vec<[f64; 2]>,
    pub d_opacity_logit: Vec<f64>,
}

impl RasterGrads {
    fn zeros(n: usize, attr_dim: usize) -> Self {
        RasterGrads {
            d_attrs: vec![0.0; n * attr_dim],
            d_position: vec![Vector3::zeros(); n],
            d_rotation: vec![[0.0; 4]; n],
            d_log_scale: vec![[0.0; 2]; n],
            d_opacity_logit: vec![0.0; n],
        }
    }

    fn add_assign(&mut self, other: &RasterGrads) {
        for (a, b) in self.d_attrs.iter_mut().zip(&other.d_attrs) {
            *a += b;
        }
        for (a, b) in self.d_position.iter_mut().zip(&other.d_position) {
            *a += b;
        }
        for (a, b) in self.d_rotation.iter_mut().zip(&other.d_rotation) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.d_log_scale.iter_mut().zip(&other.d_log_scale) {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, b) in self.d_opacity_logit.iter_mut().zip(&other.d_opacity_logit) {
            *a += b;
        }
    }
}

/// Per-surfel world-frame gradient pieces, converted to quaternion gradients
/// once per backward pass.
struct FrameGrads {
    d_r1: Vec<Vector3<f64>>,
    d_r2: Vec<Vector3<f64>>,
    d_normal: Vec<Vector3<f64>>,
}

impl FrameGrads {
    fn zeros(n: usize) -> Self {
        FrameGrads {
            d_r1: vec![Vector3::zeros(); n],
            d_r2: vec![Vector3::zeros(); n],
            d_normal: vec![Vector3::zeros(); n],
        }
    }
}

/// Exact reverse-mode adjoints of the compositing formula.
///
/// Requires a forward pass run with `retain_fragments`; the scene and
/// attributes must be bit-identical to that pass, otherwise the retained
/// fragment list is stale and an error is returned.
pub fn backward(
    surfels: &[Surfel],
    attrs: &[f64],
    attr_dim: usize,
    cam: &Camera,
    opts: &RenderOptions,
    output: &RenderOutput,
    grads_in: &OutputGrads,
) -> Result<RasterGrads> {
    let fragments = output.fragments.as_ref().ok_or_else(|| {
        Error::contract("backward requires a forward pass with retain_fragments".to_string())
    })?;
    if scene_fingerprint(surfels, attrs) != output.fingerprint {
        return Err(Error::contract(
            "stale fragment list: scene mutated since the forward pass".to_string(),
        ));
    }
    let width = output.width;
    let origin = cam.position();
    let geoms = compute_geoms(surfels, cam, &origin, opts.near);
    let n = surfels.len();

    let tile = opts.tile_size.max(1);
    let tiles_x = width.div_ceil(tile);
    let tiles_y = output.height.div_ceil(tile);

    let cam_rot = cam.rotation();
    let cam_z_row: Vector3<f64> = cam_rot.row(2).transpose();

    let partials: Vec<(RasterGrads, FrameGrads)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let x1 = (x0 + tile).min(width);
            let y1 = (y0 + tile).min(output.height);
            let mut grads = RasterGrads::zeros(n, attr_dim);
            let mut frames = FrameGrads::zeros(n);
            let mut frags: Vec<(u32, Fragment, f64, f64)> = Vec::with_capacity(64);
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let p = iy * width + ix;
                    let (start, len) = fragments.ranges[p];
                    if len == 0 {
                        // T stays 1 here; nothing depends on parameters.
                        continue;
                    }
                    let px = ix as f64 + 0.5;
                    let py = iy as f64 + 0.5;
                    let dir = cam.pixel_ray(px, py);

                    // Replay the composited fragments: (idx, frag, w_i, T_i).
                    frags.clear();
                    let mut transmittance = 1.0;
                    for k in 0..len {
                        let si = fragments.ids[(start + k) as usize];
                        let frag =
                            make_fragment(&geoms[si as usize], &dir, &origin, px, py, opts)
                                .expect("retained fragment must reproduce");
                        frags.push((si, frag, frag.alpha * transmittance, transmittance));
                        transmittance *= 1.0 - frag.alpha;
                    }
                    let t_final = transmittance;

                    let d_attr_px = grads_in
                        .d_attrs
                        .map(|g| &g[p * attr_dim..(p + 1) * attr_dim]);
                    let d_depth_px = grads_in.d_depth.map_or(0.0, |g| g[p]);
                    let d_trans_px = grads_in.d_transmittance.map_or(0.0, |g| g[p]);
                    let d_dist_px = grads_in.d_distortion.map_or(0.0, |g| g[p]);

                    // Contribution gradient g_i = dL/dw_i and depth gradients.
                    let m = frags.len();
                    let mut gi = vec![0.0; m];
                    let mut dzi = vec![0.0; m];
                    for i in 0..m {
                        let (si, frag, w_i, _) = frags[i];
                        let base = si as usize * attr_dim;
                        let mut acc = 0.0;
                        if let Some(da) = d_attr_px {
                            for d in 0..attr_dim {
                                acc += attrs[base + d] * da[d];
                            }
                        }
                        acc += frag.z * d_depth_px;
                        let mut dz = w_i * d_depth_px;
                        if d_dist_px != 0.0 {
                            let mut pair_w = 0.0;
                            let mut pair_sign = 0.0;
                            for (j, &(_, fj, w_j, _)) in frags.iter().enumerate() {
                                if j == i {
                                    continue;
                                }
                                let dz = frag.z - fj.z;
                                pair_w += w_j * dz.abs();
                                // Subgradient of |dz| vanishing at ties.
                                if dz != 0.0 {
                                    pair_sign += w_j * dz.signum();
                                }
                            }
                            acc += d_dist_px * pair_w;
                            dz += d_dist_px * w_i * pair_sign;
                        }
                        gi[i] = acc;
                        dzi[i] = dz;
                    }

                    // Suffix accumulator S_i = sum_{j>i} w_j g_j gives
                    // dL/dalpha_i = T_i g_i - S_i/(1-a_i) - T_N dT/(1-a_i).
                    let mut suffix = 0.0;
                    for i in (0..m).rev() {
                        let (si, frag, w_i, t_i) = frags[i];
                        let s = si as usize;
                        let one_minus = 1.0 - frag.alpha;
                        let d_alpha = t_i * gi[i]
                            - suffix / one_minus
                            - (t_final * d_trans_px) / one_minus;
                        suffix += w_i * gi[i];

                        if let Some(da) = d_attr_px {
                            let base = s * attr_dim;
                            for d in 0..attr_dim {
                                grads.d_attrs[base + d] += w_i * da[d];
                            }
                        }

                        let geom = &geoms[s];
                        let d_gauss = d_alpha * geom.opacity;
                        let d_opacity = d_alpha * frag.gauss;
                        grads.d_opacity_logit[s] +=
                            d_opacity * geom.opacity * (1.0 - geom.opacity);

                        let mut d_tstar = 0.0;
                        if frag.z_from_intersection {
                            d_tstar += dzi[i];
                        } else {
                            // Fallback depth is the mean's camera-z.
                            grads.d_position[s] += cam_z_row * dzi[i];
                        }

                        if frag.object_branch {
                            // G = exp(-(a^2 + b^2)/2) through the exact
                            // ray-plane intersection.
                            let d_a = -frag.a * frag.gauss * d_gauss;
                            let d_b = -frag.b * frag.gauss * d_gauss;
                            // d a / d log(s_u) = -a.
                            grads.d_log_scale[s][0] += -d_a * frag.a;
                            grads.d_log_scale[s][1] += -d_b * frag.b;
                            let d_u = d_a / geom.su;
                            let d_v = d_b / geom.sv;
                            let x = origin + dir * frag.tstar;
                            let off = x - geom.mean;
                            frames.d_r1[s] += off * d_u;
                            frames.d_r2[s] += off * d_v;
                            d_tstar += d_u * dir.dot(&geom.r1) + d_v * dir.dot(&geom.r2);
                            grads.d_position[s] += -(geom.r1 * d_u + geom.r2 * d_v);
                            if d_tstar != 0.0 {
                                grads.d_position[s] += geom.normal * (d_tstar / frag.denom);
                                frames.d_normal[s] += (geom.mean - x) * (d_tstar / frag.denom);
                            }
                        } else {
                            // Screen-filter branch: G depends only on the
                            // projected mean.
                            if d_gauss != 0.0 {
                                let sigma2 = opts.filter_std_px * opts.filter_std_px;
                                let dx = px - geom.mean_px[0];
                                let dy = py - geom.mean_px[1];
                                let d_mx = d_gauss * frag.gauss * dx / sigma2;
                                let d_my = d_gauss * frag.gauss * dy / sigma2;
                                let p_cam = cam.to_camera(&geom.mean);
                                let j_row_x = (cam_rot.row(0).transpose() * (cam.fx / p_cam.z))
                                    - cam_z_row * (cam.fx * p_cam.x / (p_cam.z * p_cam.z));
                                let j_row_y = (cam_rot.row(1).transpose() * (cam.fy / p_cam.z))
                                    - cam_z_row * (cam.fy * p_cam.y / (p_cam.z * p_cam.z));
                                grads.d_position[s] += j_row_x * d_mx + j_row_y * d_my;
                            }
                            if frag.z_from_intersection && d_tstar != 0.0 {
                                grads.d_position[s] += geom.normal * (d_tstar / frag.denom);
                                frames.d_normal[s] += (geom.mean - (origin + dir * frag.tstar))
                                    * (d_tstar / frag.denom);
                            }
                        }
                    }
                }
            }
            (grads, frames)
        })
        .collect();

    let mut total = RasterGrads::zeros(n, attr_dim);
    let mut frames = FrameGrads::zeros(n);
    for (g, f) in &partials {
        total.add_assign(g);
        for i in 0..n {
            frames.d_r1[i] += f.d_r1[i];
            frames.d_r2[i] += f.d_r2[i];
            frames.d_normal[i] += f.d_normal[i];
        }
    }
    for i in 0..n {
        let dq = quat::backprop_column_grads(
            &surfels[i].rotation,
            &frames.d_r1[i],
            &frames.d_r2[i],
            &frames.d_normal[i],
        );
        for k in 0..4 {
            total.d_rotation[i][k] += dq[k];
        }
    }
    Ok(total)
}

/// Jacobian rows mapping world-position deltas to NDC deltas at a point;
/// the densification signal pushes the position gradient through this map.
pub fn ndc_jacobian(cam: &Camera, position: &Vector3<f64>) -> Option<[Vector3<f64>; 2]> {
    let p_cam = cam.to_camera(position);
    if p_cam.z <= 1e-6 {
        return None;
    }
    let rot = cam.rotation();
    let z_row: Vector3<f64> = rot.row(2).transpose();
    let j_px = rot.row(0).transpose() * (cam.fx / p_cam.z)
        - z_row * (cam.fx * p_cam.x / (p_cam.z * p_cam.z));
    let j_py = rot.row(1).transpose() * (cam.fy / p_cam.z)
        - z_row * (cam.fy * p_cam.y / (p_cam.z * p_cam.z));
    Some([
        j_px * (2.0 / cam.width as f64),
        j_py * (2.0 / cam.height as f64),
    ])
}

#[cfg(test)]
pub(crate) mod tests;
