//! Small numeric helpers and seeded RNG construction.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of `sigmoid` expressed through its output value.
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Inverse sigmoid; the argument is clamped away from {0, 1} so the result
/// stays finite.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic stream-salted RNG.
///
/// Every stochastic choice in training derives its RNG from
/// `(seed, step, salt)` so runs are reproducible and checkpoints resume
/// bit-exactly without persisting generator state.
pub fn salted_rng(seed: u64, step: u64, salt: u64) -> ChaCha20Rng {
    let mut state = seed ^ 0x6c62_272e_07bb_0142;
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state),
        splitmix64(&mut state) ^ step,
        splitmix64(&mut state) ^ salt,
        splitmix64(&mut state) ^ step.rotate_left(17) ^ salt.rotate_left(43),
    ];
    let mut mix = words[0] ^ words[1] ^ words[2] ^ words[3];
    for (i, w) in words.iter().enumerate() {
        let mut s = *w ^ mix;
        key[i * 8..(i + 1) * 8].copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        mix = mix.rotate_left(13).wrapping_add(*w);
    }
    ChaCha20Rng::from_seed(key)
}

/// Uniform sample on the unit sphere.
pub fn sample_sphere<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Batch of uniform sphere directions.
pub fn sample_sphere_batch<R: Rng>(rng: &mut R, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| sample_sphere(rng)).collect()
}
