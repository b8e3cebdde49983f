//! Adaptive-moment optimizer with L2 weight decay folded into the gradient,
//! keyed by stable slot names so the update order is deterministic.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

pub struct Adam {
    pub config: AdamConfig,
    pub lr: f32,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            lr: 0.0,
            slots: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Number of parameter values across all slots seen so far.
    pub fn inventory_size(&self) -> usize {
        self.slots.values().map(|s| s.m.len()).sum()
    }

    pub fn step(&mut self, name: &str, param: &mut [f32], grad: &[f32]) {
        debug_assert_eq!(param.len(), grad.len());
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        slot.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(slot.t as i32);
        let bias2 = 1.0 - c.beta2.powi(slot.t as i32);
        for i in 0..param.len() {
            let g = grad[i] + c.weight_decay * param[i];
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.set_lr(0.1);
        let mut x = [0.0f32];
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 3.0)];
            opt.step("x", &mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "got {}", x[0]);
    }

    #[test]
    fn inventory_counts_values() {
        let mut opt = Adam::new(AdamConfig::default());
        opt.set_lr(0.0);
        let mut a = [0.0f32; 5];
        let mut b = [0.0f32; 3];
        opt.step("a", &mut a, &[0.0; 5]);
        opt.step("b", &mut b, &[0.0; 3]);
        opt.step("a", &mut a, &[0.0; 5]);
        assert_eq!(opt.inventory_size(), 8);
    }
}
