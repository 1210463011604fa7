//! Scene data model: surfels, cameras, and the per-image light model.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{self, Quat};
use crate::sh::{clamped_cosine_coeffs, Direction, EnvLight, ShVector, SH_COEFFS, Y_00};
use crate::util::{logit, salted_rng, sigmoid};

pub const EMBED_DIM: usize = 24;
pub const MLP_HIDDEN: usize = 64;
pub const MLP_OUT: usize = 27;

/// One 2D Gaussian surfel. Opacity and albedo are stored as unconstrained
/// logits; scale is stored in log space. The third axis of the local frame
/// is collapsed, so the rotation's last column is the surfel normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// Raw (w, x, y, z); normalized on use, renormalized after optimizer steps.
    pub rotation: Quat,
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub albedo_param: [f64; 3],
    /// Transfer-function SH coefficients (single channel).
    pub transfer: ShVector,
}

impl Surfel {
    /// A fresh surfel with the transfer initialized to the clamped-cosine
    /// lobe about its normal, so the shadowed model starts exactly at the
    /// unshadowed solution.
    pub fn new(
        position: Vector3<f64>,
        rotation: Quat,
        scale: [f64; 2],
        opacity: f64,
        albedo: [f64; 3],
    ) -> Self {
        let mut s = Surfel {
            position,
            rotation,
            log_scale: [scale[0].ln(), scale[1].ln()],
            opacity_logit: logit(opacity),
            albedo_param: [logit(albedo[0]), logit(albedo[1]), logit(albedo[2])],
            transfer: ShVector::zero(),
        };
        s.transfer = clamped_cosine_coeffs(s.normal());
        s
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat::to_matrix(&self.rotation)
    }

    /// In-plane axes and normal of the local frame.
    pub fn frame(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let m = self.rotation_matrix();
        (m.column(0).into(), m.column(1).into(), m.column(2).into())
    }

    /// The collapsed third axis of the rotation.
    pub fn normal(&self) -> Direction {
        let m = self.rotation_matrix();
        Direction::from_unit_unchecked(m.column(2).into())
    }

    pub fn scale(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn albedo(&self) -> [f64; 3] {
        [
            sigmoid(self.albedo_param[0]),
            sigmoid(self.albedo_param[1]),
            sigmoid(self.albedo_param[2]),
        ]
    }

    /// Renormalize the stored quaternion. Skips the division when the norm is
    /// already unit so a zero-learning-rate step leaves the scene bit-identical.
    pub fn renormalize_rotation(&mut self) {
        let n2: f64 = self.rotation.iter().map(|c| c * c).sum();
        if (n2 - 1.0).abs() > 1e-12 {
            let n = n2.sqrt();
            for c in &mut self.rotation {
                *c /= n;
            }
        }
    }
}

/// Local-to-world transform and 3x3 covariance of a surfel.
///
/// The transform maps local (u, v, 0) through R * diag(s_u, s_v, 0) + t;
/// the covariance is R s s^T R^T with the third scale fixed at zero. The
/// Gaussian density over offsets d is exp(-1/2 d^T Sigma^+ d) evaluated via
/// exact plane intersection in the rasterizer.
pub fn surfel_geometry(s: &Surfel) -> (Matrix4<f64>, Matrix3<f64>) {
    let rot = s.rotation_matrix();
    let [su, sv] = s.scale();
    let r1: Vector3<f64> = rot.column(0).into();
    let r2: Vector3<f64> = rot.column(1).into();
    let mut transform = Matrix4::identity();
    for i in 0..3 {
        transform[(i, 0)] = r1[i] * su;
        transform[(i, 1)] = r2[i] * sv;
        transform[(i, 2)] = 0.0;
        transform[(i, 3)] = s.position[i];
    }
    let cov = r1 * r1.transpose() * (su * su) + r2 * r2.transpose() * (sv * sv);
    (transform, cov)
}

/// Pinhole camera; right-handed, looking down +z in camera space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Rigid world-to-camera transform.
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::contract(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let r = self.rotation();
        let gram = r.transpose() * r;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > 1e-6 {
                    return Err(Error::contract(
                        "world_to_camera upper-left 3x3 must be orthonormal".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p_world + self.translation()
    }

    /// Pixel coordinates of a camera-space point (z > 0).
    pub fn project_cam(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// World-space ray through a pixel position, scaled so that the camera-z
    /// depth of `origin + t * dir` equals `t`.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * d_cam
    }

    /// Build a camera looking from `eye` toward `target` with an up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let up = if forward.cross(&up).norm() < 1e-6 {
            // Up hint parallel to the view direction; pick another axis.
            if forward.x.abs() < 0.9 {
                Vector3::new(1.0, 0.0, 0.0)
            } else {
                Vector3::new(0.0, 1.0, 0.0)
            }
        } else {
            up
        };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Camera axes: x right, y down, z forward.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: w2c,
        }
    }
}

/// Camera-facing normal with the dual-visibility flip flag.
///
/// When the stored normal faces away from the camera the negated normal is
/// used and the transfer function must be point-reflected to keep its
/// physical meaning on the visible side.
pub fn oriented_normal(s: &Surfel, cam: &Camera) -> (Direction, bool) {
    let n = s.normal();
    let view = s.position - cam.position();
    if n.dot(&view) < 0.0 {
        (n, false)
    } else {
        (n.flipped(), true)
    }
}

/// Transfer coefficients as seen from the oriented side.
pub fn effective_transfer(s: &Surfel, flipped: bool) -> ShVector {
    if flipped {
        s.transfer.point_reflected()
    } else {
        s.transfer
    }
}

/// Per-image latent codes plus the MLP mapping latent -> environment light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightModel {
    pub embeddings: Vec<[f64; EMBED_DIM]>,
    pub mlp: Mlp,
}

/// Three fully-connected layers: 24 -> 64 -> 64 -> 27, ReLU on the hidden
/// layers, linear output so coefficients can be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Vec<f64>, // HIDDEN x EMBED
    pub b1: Vec<f64>, // HIDDEN
    pub w2: Vec<f64>, // HIDDEN x HIDDEN
    pub b2: Vec<f64>, // HIDDEN
    pub w3: Vec<f64>, // OUT x HIDDEN
    pub b3: Vec<f64>, // OUT
}

/// Cached activations from a forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: [f64; EMBED_DIM],
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros() -> Self {
        MlpGrads {
            w1: vec![0.0; MLP_HIDDEN * EMBED_DIM],
            b1: vec![0.0; MLP_HIDDEN],
            w2: vec![0.0; MLP_HIDDEN * MLP_HIDDEN],
            b2: vec![0.0; MLP_HIDDEN],
            w3: vec![0.0; MLP_OUT * MLP_HIDDEN],
            b3: vec![0.0; MLP_OUT],
        }
    }
}

fn linear_forward(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks(n_in).zip(b.iter())) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(input.iter()) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

impl Mlp {
    pub fn zeros() -> Self {
        Mlp {
            w1: vec![0.0; MLP_HIDDEN * EMBED_DIM],
            b1: vec![0.0; MLP_HIDDEN],
            w2: vec![0.0; MLP_HIDDEN * MLP_HIDDEN],
            b2: vec![0.0; MLP_HIDDEN],
            w3: vec![0.0; MLP_OUT * MLP_HIDDEN],
            b3: vec![0.0; MLP_OUT],
        }
    }

    /// Xavier-uniform weights; the output bias seeds a gray ambient light
    /// (DC slots such that a unit-albedo surfel renders at unit radiance).
    pub fn init(seed: u64) -> Self {
        let mut rng = salted_rng(seed, 0, 0x4d4c50);
        let mut mlp = Self::zeros();
        let fill = |w: &mut [f64], n_in: usize, n_out: usize, rng: &mut rand_chacha::ChaCha20Rng| {
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut mlp.w1, EMBED_DIM, MLP_HIDDEN, &mut rng);
        fill(&mut mlp.w2, MLP_HIDDEN, MLP_HIDDEN, &mut rng);
        fill(&mut mlp.w3, MLP_HIDDEN, MLP_OUT, &mut rng);
        let dc = 1.0 / (std::f64::consts::PI * Y_00);
        for ch in 0..3 {
            mlp.b3[ch * SH_COEFFS] = dc;
        }
        mlp
    }

    pub fn forward(&self, input: &[f64; EMBED_DIM]) -> ([f64; MLP_OUT], MlpCache) {
        let mut h1 = vec![0.0; MLP_HIDDEN];
        linear_forward(&self.w1, &self.b1, input, &mut h1);
        for v in &mut h1 {
            *v = v.max(0.0);
        }
        let mut h2 = vec![0.0; MLP_HIDDEN];
        linear_forward(&self.w2, &self.b2, &h1, &mut h2);
        for v in &mut h2 {
            *v = v.max(0.0);
        }
        let mut out_v = vec![0.0; MLP_OUT];
        linear_forward(&self.w3, &self.b3, &h2, &mut out_v);
        let mut out = [0.0; MLP_OUT];
        out.copy_from_slice(&out_v);
        (
            out,
            MlpCache {
                input: *input,
                h1,
                h2,
            },
        )
    }

    /// Backward pass; returns parameter gradients and the input gradient.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64; MLP_OUT]) -> (MlpGrads, [f64; EMBED_DIM]) {
        let mut g = MlpGrads::zeros();

        // Layer 3 (linear).
        let mut d_h2 = vec![0.0; MLP_HIDDEN];
        for o in 0..MLP_OUT {
            g.b3[o] += d_out[o];
            for i in 0..MLP_HIDDEN {
                g.w3[o * MLP_HIDDEN + i] += d_out[o] * cache.h2[i];
                d_h2[i] += d_out[o] * self.w3[o * MLP_HIDDEN + i];
            }
        }
        // ReLU.
        for i in 0..MLP_HIDDEN {
            if cache.h2[i] <= 0.0 {
                d_h2[i] = 0.0;
            }
        }

        // Layer 2.
        let mut d_h1 = vec![0.0; MLP_HIDDEN];
        for o in 0..MLP_HIDDEN {
            g.b2[o] += d_h2[o];
            for i in 0..MLP_HIDDEN {
                g.w2[o * MLP_HIDDEN + i] += d_h2[o] * cache.h1[i];
                d_h1[i] += d_h2[o] * self.w2[o * MLP_HIDDEN + i];
            }
        }
        for i in 0..MLP_HIDDEN {
            if cache.h1[i] <= 0.0 {
                d_h1[i] = 0.0;
            }
        }

        // Layer 1.
        let mut d_input = [0.0; EMBED_DIM];
        for o in 0..MLP_HIDDEN {
            g.b1[o] += d_h1[o];
            for i in 0..EMBED_DIM {
                g.w1[o * EMBED_DIM + i] += d_h1[o] * cache.input[i];
                d_input[i] += d_h1[o] * self.w1[o * EMBED_DIM + i];
            }
        }
        (g, d_input)
    }

    /// Flatten parameters in the declared order (w1, b1, w2, b2, w3, b3).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut mlp = Self::zeros();
        let expect = mlp.param_count();
        if flat.len() != expect {
            return Err(Error::invalid_data(format!(
                "MLP weight blob has {} values, expected {expect}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (dst, len) in [
            (&mut mlp.w1, MLP_HIDDEN * EMBED_DIM),
            (&mut mlp.b1, MLP_HIDDEN),
            (&mut mlp.w2, MLP_HIDDEN * MLP_HIDDEN),
            (&mut mlp.b2, MLP_HIDDEN),
            (&mut mlp.w3, MLP_OUT * MLP_HIDDEN),
            (&mut mlp.b3, MLP_OUT),
        ] {
            dst.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(mlp)
    }

    pub fn param_count(&self) -> usize {
        MLP_HIDDEN * EMBED_DIM
            + MLP_HIDDEN
            + MLP_HIDDEN * MLP_HIDDEN
            + MLP_HIDDEN
            + MLP_OUT * MLP_HIDDEN
            + MLP_OUT
    }
}

impl LightModel {
    /// Variant of [`LightModel::init`] whose hidden pre-activations stay at
    /// least `margin` away from the ReLU kinks for every embedding. Finite
    /// difference gradient checks need this; plain training does not.
    pub fn init_kink_free(image_count: usize, seed: u64, margin: f64) -> Self {
        'seed: for attempt in 0..1000 {
            let mut model = Self::init(image_count, seed.wrapping_add(attempt));
            let mut rng = salted_rng(seed.wrapping_add(attempt), 1, 0x4a4954);
            for b in model.mlp.b1.iter_mut().chain(model.mlp.b2.iter_mut()) {
                *b = rng.random_range(-0.3..0.3);
            }
            for e in &model.embeddings {
                let mut pre1 = vec![0.0; MLP_HIDDEN];
                linear_forward(&model.mlp.w1, &model.mlp.b1, e, &mut pre1);
                if pre1.iter().any(|v| v.abs() < margin) {
                    continue 'seed;
                }
                let h1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
                let mut pre2 = vec![0.0; MLP_HIDDEN];
                linear_forward(&model.mlp.w2, &model.mlp.b2, &h1, &mut pre2);
                if pre2.iter().any(|v| v.abs() < margin) {
                    continue 'seed;
                }
            }
            return model;
        }
        panic!("no kink-free light model found near seed {seed}");
    }

    /// Fresh model for `image_count` training images. Embeddings start as
    /// small seeded noise so per-image lights can differentiate.
    pub fn init(image_count: usize, seed: u64) -> Self {
        let mut rng = salted_rng(seed, 0, 0x454d42);
        let embeddings = (0..image_count)
            .map(|_| {
                let mut e = [0.0; EMBED_DIM];
                for v in &mut e {
                    *v = rng.random_range(-0.01..0.01);
                }
                e
            })
            .collect();
        LightModel {
            embeddings,
            mlp: Mlp::init(seed),
        }
    }

    pub fn image_count(&self) -> usize {
        self.embeddings.len()
    }

    pub fn forward_cached(&self, image_index: usize) -> Result<(EnvLight, MlpCache)> {
        let e = self
            .embeddings
            .get(image_index)
            .ok_or(Error::IndexOutOfRange {
                index: image_index,
                len: self.embeddings.len(),
            })?;
        let (out, cache) = self.mlp.forward(e);
        Ok((EnvLight::from_flat(&out), cache))
    }
}

/// Deterministic forward pass of the per-image light MLP: latent code ->
/// 27 outputs reshaped to 3 channels x 9 coefficients.
pub fn mlp_forward(model: &LightModel, image_index: usize) -> Result<EnvLight> {
    model.forward_cached(image_index).map(|(l, _)| l)
}

/// Seed point for surfel initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointInit {
    pub position: [f64; 3],
    #[serde(default)]
    pub normal: Option<[f64; 3]>,
    #[serde(default)]
    pub color: Option<[f64; 3]>,
}

const INIT_OPACITY: f64 = 0.5;

/// Initialize surfels from a point cloud. Scale starts at the mean
/// nearest-neighbor distance; orientation comes from the point normal when
/// present, otherwise it is random.
pub fn init_from_points(points: &[PointInit], seed: u64) -> Vec<Surfel> {
    assert!(!points.is_empty());
    let mut rng = salted_rng(seed, 0, 0x504e54);
    let mut mean_nn = 0.0;
    for (i, p) in points.iter().enumerate() {
        let pi = Vector3::from(p.position);
        let mut best = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if i != j {
                best = best.min((pi - Vector3::from(q.position)).norm_squared());
            }
        }
        if best.is_finite() {
            mean_nn += best.sqrt();
        }
    }
    mean_nn /= points.len() as f64;
    if mean_nn <= 0.0 || !mean_nn.is_finite() {
        mean_nn = 0.1;
    }

    points
        .iter()
        .map(|p| {
            let rotation = match p.normal {
                Some(n) => {
                    let n = Vector3::from(n).normalize();
                    let frame = crate::sh::frame_rotation(&n);
                    matrix_to_quat(&frame)
                }
                None => random_unit_quat(&mut rng),
            };
            let albedo = p.color.unwrap_or([0.5, 0.5, 0.5]);
            Surfel::new(
                Vector3::from(p.position),
                rotation,
                [mean_nn, mean_nn],
                INIT_OPACITY,
                albedo,
            )
        })
        .collect()
}

/// Uniform random surfels inside a bounding box; scale set from the expected
/// nearest-neighbor spacing of a uniform sample.
pub fn init_random_in_bbox(min: Vector3<f64>, max: Vector3<f64>, count: usize, seed: u64) -> Vec<Surfel> {
    let mut rng = salted_rng(seed, 0, 0x424f58);
    let extent = max - min;
    let volume = extent.x.max(1e-6) * extent.y.max(1e-6) * extent.z.max(1e-6);
    let spacing = (volume / count as f64).cbrt();
    (0..count)
        .map(|_| {
            let p = Vector3::new(
                rng.random_range(min.x..max.x),
                rng.random_range(min.y..max.y),
                rng.random_range(min.z..max.z),
            );
            let q = random_unit_quat(&mut rng);
            Surfel::new(p, q, [spacing, spacing], INIT_OPACITY, [0.5, 0.5, 0.5])
        })
        .collect()
}

fn random_unit_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|c| c * c).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// Quaternion (w, x, y, z) from a rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    }
}
