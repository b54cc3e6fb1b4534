//! AdamW with per-component learning-rate multipliers.

use super::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `(name prefix, multiplier)`; the first matching prefix wins.
    pub lr_scale: Vec<(String, f64)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_scale: Vec::new(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn with_scale(mut self, prefix: &str, scale: f64) -> Self {
        self.lr_scale.push((prefix.to_string(), scale));
        self
    }

    fn scale_for(&self, name: &str) -> f64 {
        self.lr_scale
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map(|(_, s)| *s)
            .unwrap_or(1.0)
    }

    /// One update from gradients aligned with the store (`grads[id]`).
    /// Non-trainable parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let id = ParamId(i);
            let (trainable, scale) = {
                let p = store.get(id);
                (p.trainable, self.scale_for(&p.name))
            };
            if !trainable || grads[i].is_empty() {
                continue;
            }
            let lr = self.lr * scale;
            let data = &mut store.get_mut(id).tensor.data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..data.len() {
                let gk = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[k]);
            }
        }
    }
}
