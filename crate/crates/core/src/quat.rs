//! Quaternion helpers with hand-derived gradients.
//!
//! Surfel rotations are stored as raw (w, x, y, z) components; every use
//! normalizes first, so the rotation is invariant to the stored norm and
//! gradients flow through the normalization. That keeps finite-difference
//! checks on the raw components honest.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4]; // (w, x, y, z)

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn normalize(q: &Quat) -> (Quat, f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Rotation matrix from a raw quaternion (normalized internally).
pub fn to_matrix(q: &Quat) -> Matrix3<f64> {
    let (u, _) = normalize(q);
    matrix_from_unit(&u)
}

pub fn matrix_from_unit(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of `matrix_from_unit` with respect to the four unit
/// quaternion components.
pub fn matrix_grads_unit(q: &Quat) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let dx = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    [dw, dx, dy, dz]
}

/// Chain a gradient with respect to the rotation matrix back to the raw
/// quaternion components, including the normalization Jacobian.
pub fn backprop_matrix_grad(q_raw: &Quat, d_matrix: &Matrix3<f64>) -> Quat {
    let (u, n) = normalize(q_raw);
    let grads = matrix_grads_unit(&u);
    // dL/du_k = <dR/du_k, dL/dR>
    let mut d_unit = [0.0; 4];
    for k in 0..4 {
        d_unit[k] = grads[k].component_mul(d_matrix).sum();
    }
    // du/dq = (I - u u^T) / n
    let dot: f64 = (0..4).map(|i| d_unit[i] * u[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_unit[i] - dot * u[i]) / n;
    }
    out
}

/// Convenience: gradient contribution to the raw quaternion from gradients
/// on the three rotation-matrix columns.
pub fn backprop_column_grads(
    q_raw: &Quat,
    d_col0: &Vector3<f64>,
    d_col1: &Vector3<f64>,
    d_col2: &Vector3<f64>,
) -> Quat {
    let d_matrix = Matrix3::from_columns(&[*d_col0, *d_col1, *d_col2]);
    backprop_matrix_grad(q_raw, &d_matrix)
}

#[cfg(test)]
pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (angle / 2.0).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{salted_rng, sample_sphere};
    use rand::Rng;

    fn random_quat(rng: &mut impl Rng) -> Quat {
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    }

    #[test]
    fn identity_matrix() {
        assert_eq!(to_matrix(&IDENTITY), Matrix3::identity());
    }

    #[test]
    fn matches_nalgebra_conversion() {
        let mut rng = salted_rng(31, 0, 0);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            let m = to_matrix(&q);
            let nq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            let nm = nq.to_rotation_matrix().into_inner();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[(i, j)] - nm[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matrix_gradients_match_finite_differences() {
        let mut rng = salted_rng(32, 0, 0);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            // Scalar probe L = <W, R(q)> for a random weight matrix.
            let w = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = backprop_matrix_grad(&q, &w);
            let h = 1e-6;
            for k in 0..4 {
                let mut qp = q;
                qp[k] += h;
                let mut qm = q;
                qm[k] -= h;
                let fd = (to_matrix(&qp).component_mul(&w).sum()
                    - to_matrix(&qm).component_mul(&w).sum())
                    / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() < 1e-6 * fd.abs().max(1.0),
                    "component {k}: fd {fd} analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn axis_angle_rotates_as_expected() {
        let q = from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
        let m = to_matrix(&q);
        let v = m * Vector3::new(0.0, 0.0, 1.0);
        assert!((v - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        let mut rng = salted_rng(33, 0, 0);
        let axis = sample_sphere(&mut rng);
        let q = from_axis_angle(&axis, 0.37);
        assert!((to_matrix(&q).determinant() - 1.0).abs() < 1e-12);
    }
}
