//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Default::default() }
    }
}

/// Optimizer state for a fixed list of parameter vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        self.t = 0;
        for s in self.m.iter_mut().chain(self.v.iter_mut()) {
            s.fill(0.0);
        }
    }

    /// One update. `decay[i]` selects whether weight decay applies to parameter `i`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], decay: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if decay.get(i).copied().unwrap_or(true) { c.lr * c.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= wd * p[j];
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) }, &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut [&mut p], &[&[3.0, -0.5]], &[true]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.05) }, &[1]);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 1.0)];
            opt.step(&mut [&mut p], &[&g], &[true]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
