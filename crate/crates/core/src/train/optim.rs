use alloc::vec::Vec;

use crate::diffcore::Array;
use crate::error::{invalid, Result};

/// `lr0 * (1 - iter / total)^power`.
pub fn lr_schedule(iter: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(invalid(alloc::format!("iteration {} of {}", iter, total)));
    }
    Ok(lr0 * libm::pow(1.0 - iter as f64 / total as f64, power))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    pub m: Vec<Array<f32>>,
    pub v: Vec<Array<f32>>,
}

impl AdamW {
    pub fn new(params: &[Array<f32>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: eps as f32,
            weight_decay: weight_decay as f32,
            t: 0,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Array<f32>], grads: &[Array<f32>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - libm::powf(self.beta1, self.t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, self.t as f32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * (mh / (libm::sqrtf(vh) + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}
