//! Real spherical harmonics of degree 2.
//!
//! Everything lighting-related is built on one fixed convention: the real-SH
//! table used by the irradiance-environment-map closed forms. Coefficient
//! ordering is `(l,m) = (0,0),(1,-1),(1,0),(1,1),(2,-2),(2,-1),(2,0),(2,1),(2,2)`
//! and the world frame is right-handed with z up. All math here is f64; the
//! constants below are the single source of truth for every other module.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::sync::LazyLock;

use nalgebra::{Matrix3, Matrix4, Matrix5, Vector3, Vector4, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageF;

/// Number of coefficients for degree-2 real SH: (n+1)^2 with n = 2.
pub const SH_COEFFS: usize = 9;

// Basis constants. The 6-digit values quoted in the irradiance-map literature
// (0.282095, 0.488603, 1.092548, 0.315392, 0.546274) are these, rounded.
pub const Y_00: f64 = 0.282_094_791_773_878_14; // 1 / (2 sqrt(pi))
pub const Y_1: f64 = 0.488_602_511_902_919_9; // sqrt(3 / (4 pi)), times y|z|x
pub const Y_2A: f64 = 1.092_548_430_592_079_2; // sqrt(15 / (4 pi)), times xy|yz|xz
pub const Y_20: f64 = 0.315_391_565_252_520_05; // sqrt(5 / (16 pi)), times 3z^2 - 1
pub const Y_22: f64 = 0.546_274_215_296_039_6; // sqrt(15 / (16 pi)), times x^2 - y^2

// Quadratic-form constants for the 4x4 irradiance matrix; published rounded
// values are c1..c5 = 0.429043, 0.511664, 0.743125, 0.886227, 0.247708.
pub const C1: f64 = FRAC_PI_4 * Y_22;
pub const C2: f64 = (PI / 3.0) * Y_1;
pub const C3: f64 = 3.0 * FRAC_PI_4 * Y_20;
pub const C4: f64 = PI * Y_00;
pub const C5: f64 = FRAC_PI_4 * Y_20;

/// Per-band scale of the clamped-cosine (Lambertian) kernel: convolving an SH
/// function with max(cos, 0) multiplies band l by this.
pub const COSINE_LOBE_BAND_SCALE: [f64; 3] = [PI, 2.0 * PI / 3.0, FRAC_PI_4];

/// Unit direction, world frame, z up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Wrap a vector that must already be unit length to within 1e-6;
    /// the stored value is normalized exactly.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "direction must be unit length (norm {n})"
            )));
        }
        Ok(Direction(v / n))
    }

    /// Normalize an arbitrary non-degenerate vector into a direction.
    pub fn normalized(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if n < 1e-12 {
            return Err(Error::contract(
                "cannot normalize a near-zero vector into a direction".to_string(),
            ));
        }
        Ok(Direction(v / n))
    }

    pub(crate) fn from_unit_unchecked(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9);
        Direction(v)
    }

    pub fn as_vec(&self) -> Vector3<f64> {
        self.0
    }

    pub fn flipped(&self) -> Direction {
        Direction(-self.0)
    }
}

impl std::ops::Deref for Direction {
    type Target = Vector3<f64>;
    fn deref(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Degree-2 real SH coefficient block for one scalar function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShVector {
    pub coeffs: [f64; SH_COEFFS],
}

impl ShVector {
    pub fn zero() -> Self {
        ShVector {
            coeffs: [0.0; SH_COEFFS],
        }
    }

    pub fn new(coeffs: [f64; SH_COEFFS]) -> Self {
        ShVector { coeffs }
    }

    /// SH vector representing the constant function `value` on the sphere.
    pub fn constant(value: f64) -> Self {
        let mut v = Self::zero();
        v.coeffs[0] = value / Y_00;
        v
    }

    /// Reconstruct the represented function at a direction.
    pub fn eval(&self, dir: Direction) -> f64 {
        let basis = eval_basis(dir);
        self.coeffs
            .iter()
            .zip(basis.iter())
            .map(|(c, y)| c * y)
            .sum()
    }

    pub(crate) fn eval_raw(&self, v: &Vector3<f64>) -> f64 {
        let basis = eval_basis_raw(v);
        self.coeffs
            .iter()
            .zip(basis.iter())
            .map(|(c, y)| c * y)
            .sum()
    }

    /// Coefficients of the point-reflected function f(-w): odd bands negate.
    pub fn point_reflected(&self) -> ShVector {
        let mut c = self.coeffs;
        c[1] = -c[1];
        c[2] = -c[2];
        c[3] = -c[3];
        ShVector { coeffs: c }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> ShVector {
        let mut c = self.coeffs;
        for v in &mut c {
            *v *= s;
        }
        ShVector { coeffs: c }
    }

    pub fn add(&self, other: &ShVector) -> ShVector {
        let mut c = self.coeffs;
        for (a, b) in c.iter_mut().zip(other.coeffs.iter()) {
            *a += b;
        }
        ShVector { coeffs: c }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Environment light: one SH block per RGB channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvLight {
    pub channels: [ShVector; 3],
}

impl EnvLight {
    pub fn zero() -> Self {
        EnvLight {
            channels: [ShVector::zero(); 3],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), 27);
        let mut out = Self::zero();
        for ch in 0..3 {
            for i in 0..SH_COEFFS {
                out.channels[ch].coeffs[i] = flat[ch * SH_COEFFS + i];
            }
        }
        out
    }

    pub fn to_flat(&self) -> [f64; 27] {
        let mut flat = [0.0; 27];
        for ch in 0..3 {
            for i in 0..SH_COEFFS {
                flat[ch * SH_COEFFS + i] = self.channels[ch].coeffs[i];
            }
        }
        flat
    }

    pub fn eval(&self, dir: Direction) -> [f64; 3] {
        let basis = eval_basis(dir);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = self.channels[ch]
                .coeffs
                .iter()
                .zip(basis.iter())
                .map(|(c, y)| c * y)
                .sum();
        }
        out
    }

    pub fn rotated(&self, rot: &Matrix3<f64>) -> Result<EnvLight> {
        Ok(EnvLight {
            channels: [
                rotate_sh(&self.channels[0], rot)?,
                rotate_sh(&self.channels[1], rot)?,
                rotate_sh(&self.channels[2], rot)?,
            ],
        })
    }

    pub fn scaled(&self, s: f64) -> EnvLight {
        EnvLight {
            channels: [
                self.channels[0].scaled(s),
                self.channels[1].scaled(s),
                self.channels[2].scaled(s),
            ],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(|c| c.is_finite())
    }

    /// Evaluate the light on an equirectangular grid. Negative reconstructed
    /// values are clamped to zero; the clamp count is returned so callers can
    /// report it.
    pub fn render_equirect(&self, width: usize, height: usize) -> (ImageF, usize) {
        let mut clamped = 0usize;
        let img = ImageF::from_fn(width, height, 3, |x, y, c| {
            let dir = equirect_direction(x, y, width, height);
            let v = self.channels[c].eval_raw(&dir);
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        });
        (img, clamped)
    }
}

/// 4x4 symmetric quadratic form giving irradiance as `n~^T M n~`
/// with `n~ = (x, y, z, 1)`; one per color channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrradianceMatrix {
    pub m: Matrix4<f64>,
}

impl IrradianceMatrix {
    /// Irradiance seen by a surface with the given unit normal.
    pub fn eval(&self, normal: Direction) -> f64 {
        let n = Vector4::new(normal.x, normal.y, normal.z, 1.0);
        (n.transpose() * self.m * n)[(0, 0)]
    }

    /// Gradient of the quadratic form with respect to the normal vector.
    pub fn eval_grad(&self, normal: Direction) -> Vector3<f64> {
        let n = Vector4::new(normal.x, normal.y, normal.z, 1.0);
        let g = 2.0 * (self.m * n);
        Vector3::new(g.x, g.y, g.z)
    }
}

/// Evaluate the 9 basis functions at a unit direction.
pub fn eval_basis(dir: Direction) -> [f64; SH_COEFFS] {
    eval_basis_raw(&dir.as_vec())
}

/// Basis evaluation for callers that guarantee a unit vector.
#[inline]
pub(crate) fn eval_basis_raw(v: &Vector3<f64>) -> [f64; SH_COEFFS] {
    let (x, y, z) = (v.x, v.y, v.z);
    [
        Y_00,
        Y_1 * y,
        Y_1 * z,
        Y_1 * x,
        Y_2A * x * y,
        Y_2A * y * z,
        Y_20 * (3.0 * z * z - 1.0),
        Y_2A * x * z,
        Y_22 * (x * x - y * y),
    ]
}

/// Integral of the product of two band-limited functions: the coefficient
/// dot product.
pub fn sh_dot(a: &ShVector, b: &ShVector) -> f64 {
    a.coeffs
        .iter()
        .zip(b.coeffs.iter())
        .map(|(x, y)| x * y)
        .sum()
}

fn check_rotation(rot: &Matrix3<f64>) -> Result<()> {
    let gram = rot.transpose() * rot;
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    if err > 1e-6 || (rot.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::contract(
            "rotate_sh requires an orthonormal rotation with det +1".to_string(),
        ));
    }
    Ok(())
}

// Sample directions for the band-2 rotation-by-reprojection construction.
const BAND2_DIRS: [[f64; 3]; 5] = {
    const K: f64 = std::f64::consts::FRAC_1_SQRT_2;
    [
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [K, K, 0.0],
        [K, 0.0, K],
        [0.0, K, K],
    ]
};

fn band2_basis(v: &Vector3<f64>) -> Vector5<f64> {
    let b = eval_basis_raw(v);
    Vector5::new(b[4], b[5], b[6], b[7], b[8])
}

static BAND2_INV: LazyLock<Matrix5<f64>> = LazyLock::new(|| {
    let mut a = Matrix5::zeros();
    for (j, d) in BAND2_DIRS.iter().enumerate() {
        let col = band2_basis(&Vector3::new(d[0], d[1], d[2]));
        for i in 0..5 {
            a[(i, j)] = col[i];
        }
    }
    a.try_inverse().expect("band-2 sample directions are independent")
});

/// Rotate an SH coefficient block so the represented function satisfies
/// `f'(w) = f(R^T w)`. Bands transform independently: band 0 is invariant,
/// band 1 rotates as a vector, band 2 is rebuilt by rotating five sample
/// directions and re-projecting through the band-2 reproducing kernel.
pub fn rotate_sh(v: &ShVector, rot: &Matrix3<f64>) -> Result<ShVector> {
    check_rotation(rot)?;
    Ok(rotate_sh_unchecked(v, rot))
}

pub(crate) fn rotate_sh_unchecked(v: &ShVector, rot: &Matrix3<f64>) -> ShVector {
    let mut out = ShVector::zero();
    out.coeffs[0] = v.coeffs[0];

    // Band 1: coefficients (slot order y, z, x) follow the lobe direction.
    let g = Vector3::new(v.coeffs[3], v.coeffs[1], v.coeffs[2]);
    let g = rot * g;
    out.coeffs[1] = g.y;
    out.coeffs[2] = g.z;
    out.coeffs[3] = g.x;

    // Band 2 via rotated sample directions.
    let c2 = Vector5::new(
        v.coeffs[4], v.coeffs[5], v.coeffs[6], v.coeffs[7], v.coeffs[8],
    );
    let w = *BAND2_INV * c2;
    let mut c2_rot = Vector5::zeros();
    for (j, d) in BAND2_DIRS.iter().enumerate() {
        let rd = rot * Vector3::new(d[0], d[1], d[2]);
        c2_rot += band2_basis(&rd) * w[j];
    }
    out.coeffs[4] = c2_rot[0];
    out.coeffs[5] = c2_rot[1];
    out.coeffs[6] = c2_rot[2];
    out.coeffs[7] = c2_rot[3];
    out.coeffs[8] = c2_rot[4];
    out
}

/// Any rotation taking +z to `to`; used to orient zonal lobes.
pub(crate) fn frame_rotation(to: &Vector3<f64>) -> Matrix3<f64> {
    let z = *to;
    let helper = if z.z.abs() < 0.9 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        Vector3::new(1.0, 0.0, 0.0)
    };
    let x = helper.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

/// SH expansion of the clamped cosine `max(n . w, 0)` about a unit normal.
///
/// The zonal coefficients about +z are rotated into place; by the zonal
/// property this equals scaling the basis evaluated at `n` by the per-band
/// cosine-lobe constants.
pub fn clamped_cosine_coeffs(normal: Direction) -> ShVector {
    let zonal = ShVector::new([
        COSINE_LOBE_BAND_SCALE[0] * Y_00,
        0.0,
        COSINE_LOBE_BAND_SCALE[1] * Y_1,
        0.0,
        0.0,
        0.0,
        COSINE_LOBE_BAND_SCALE[2] * Y_20 * 2.0,
        0.0,
        0.0,
    ]);
    rotate_sh_unchecked(&zonal, &frame_rotation(&normal.as_vec()))
}

/// Assemble the irradiance quadratic form from one SH light channel.
pub fn irradiance_matrix(light: &ShVector) -> IrradianceMatrix {
    let l = &light.coeffs;
    let (l00, l1m1, l10, l11) = (l[0], l[1], l[2], l[3]);
    let (l2m2, l2m1, l20, l21, l22) = (l[4], l[5], l[6], l[7], l[8]);
    let m = Matrix4::new(
        C1 * l22,
        C1 * l2m2,
        C1 * l21,
        C2 * l11,
        C1 * l2m2,
        -C1 * l22,
        C1 * l2m1,
        C2 * l1m1,
        C1 * l21,
        C1 * l2m1,
        C3 * l20,
        C2 * l10,
        C2 * l11,
        C2 * l1m1,
        C2 * l10,
        C4 * l00 - C5 * l20,
    );
    IrradianceMatrix { m }
}

/// Direction of the center of an equirectangular pixel.
///
/// Row 0 is the top of the sphere (theta = 0 at +z), column 0 is phi = 0
/// (+x) with phi increasing eastward (toward +y).
pub fn equirect_direction(x: usize, y: usize, width: usize, height: usize) -> Vector3<f64> {
    let theta = PI * (y as f64 + 0.5) / height as f64;
    let phi = TAU * (x as f64 + 0.5) / width as f64;
    let st = theta.sin();
    Vector3::new(st * phi.cos(), st * phi.sin(), theta.cos())
}

/// Project an equirectangular radiance map onto degree-2 SH per channel
/// using solid-angle-weighted quadrature (per-row weight sin(theta) dtheta dphi).
pub fn project_envmap(map: &ImageF) -> Result<EnvLight> {
    if map.channels != 3 {
        return Err(Error::invalid_data(format!(
            "environment map must have 3 channels, got {}",
            map.channels
        )));
    }
    if map.height < 2 || map.width < 4 {
        return Err(Error::invalid_data(format!(
            "environment map too small ({}x{}), need at least 4x2",
            map.width, map.height
        )));
    }
    for &v in &map.data {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid_data(format!(
                "environment map contains an invalid radiance value ({v})"
            )));
        }
    }

    let dtheta = PI / map.height as f64;
    let dphi = TAU / map.width as f64;
    let mut out = EnvLight::zero();
    for y in 0..map.height {
        let theta = PI * (y as f64 + 0.5) / map.height as f64;
        let weight = theta.sin() * dtheta * dphi;
        for x in 0..map.width {
            let dir = equirect_direction(x, y, map.width, map.height);
            let basis = eval_basis_raw(&dir);
            let px = map.pixel(x, y);
            for ch in 0..3 {
                let lw = px[ch] * weight;
                for i in 0..SH_COEFFS {
                    out.channels[ch].coeffs[i] += lw * basis[i];
                }
            }
        }
    }
    Ok(out)
}
