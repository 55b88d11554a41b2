use serde::{Deserialize, Serialize};

use farskip_core::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// AdamW with decoupled weight decay and bias correction.
pub struct AdamW {
    cfg: AdamWConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// One update. `grads[i] == None` leaves parameter `i` (and its moments)
    /// untouched; `decay[i]` enables weight decay for it.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], lr: f64, decay: &[bool]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params[i].data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for x in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *x *= s;
        }
    }
    norm
}
