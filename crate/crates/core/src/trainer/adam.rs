//! Adam with first/second-moment state laid out in per-row strides.
//!
//! Each parameter group (positions, rotations, transfer SH, ...) owns one
//! `Adam`. Rows correspond to surfels (or embedding slots) so density
//! control can remap state when the surfel set changes; per-row step
//! counters keep bias correction exact for rows created mid-training.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub stride: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-row step counts (bias correction).
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(stride: usize, rows: usize) -> Self {
        Adam {
            stride,
            m: vec![0.0; stride * rows],
            v: vec![0.0; stride * rows],
            t: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    /// One update over every row.
    pub fn step_all(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let rows: Vec<usize> = (0..self.rows()).collect();
        self.step_rows(params, grads, lr, &rows);
    }

    /// One update over selected rows only (sparse groups such as per-image
    /// embeddings).
    pub fn step_rows(&mut self, params: &mut [f64], grads: &[f64], lr: f64, rows: &[usize]) {
        assert_eq!(params.len(), self.stride * self.rows());
        assert_eq!(grads.len(), params.len());
        for &r in rows {
            self.t[r] += 1;
            let bc1 = 1.0 - BETA1.powi(self.t[r] as i32);
            let bc2 = 1.0 - BETA2.powi(self.t[r] as i32);
            for i in r * self.stride..(r + 1) * self.stride {
                let g = grads[i];
                self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }

    /// Rebuild state after density control. `map[new_row]` names the old
    /// row whose state carries over; `None` rows start fresh.
    pub fn remap(&mut self, map: &[Option<usize>]) {
        let mut m = vec![0.0; self.stride * map.len()];
        let mut v = vec![0.0; self.stride * map.len()];
        let mut t = vec![0u64; map.len()];
        for (new, old) in map.iter().enumerate() {
            if let Some(old) = *old {
                m[new * self.stride..(new + 1) * self.stride]
                    .copy_from_slice(&self.m[old * self.stride..(old + 1) * self.stride]);
                v[new * self.stride..(new + 1) * self.stride]
                    .copy_from_slice(&self.v[old * self.stride..(old + 1) * self.stride]);
                t[new] = self.t[old];
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
