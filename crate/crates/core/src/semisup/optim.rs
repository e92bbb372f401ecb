//! AdamW with decoupled weight decay and a polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Group, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_iters: usize,
}

/// `(1 - t / total)^power`, clamped at zero past the end.
pub fn poly_factor(t: usize, total: usize, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    (1.0 - t as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Base learning rate of a group; mask tokens and the ensemble weight
    /// train at the decoder rate.
    pub fn base_lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.cfg.lr_encoder,
            Group::Decoder | Group::Other => self.cfg.lr_decoder,
        }
    }

    pub fn lr_at(&self, group: Group, t: usize) -> f64 {
        self.base_lr(group) * poly_factor(t, self.cfg.total_iters, self.cfg.poly_power)
    }

    /// Apply one update at schedule position `t` and clear the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, t: usize) -> Result<()> {
        for (name, e) in store.iter() {
            if e.trainable && !e.grad.all_finite() {
                return Err(Error::Diverged {
                    iteration: t,
                    msg: format!("non-finite gradient in `{name}`"),
                });
            }
        }
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let factor = poly_factor(t, c.total_iters, c.poly_power);
        for (name, e) in store.iter_mut() {
            if !e.trainable {
                continue;
            }
            let lr = self.base_lr(e.group) * factor;
            let n = e.value.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = e.grad.data();
            for (i, p) in e.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                let mut theta = p.as_f64();
                theta -= lr * c.weight_decay * theta;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
                *p = T::from_f64(theta);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
