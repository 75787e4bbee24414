use std::f64::consts::PI;

use super::TrainConfig;
use crate::fluxvit::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup to `lr`, then cosine decay to zero at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_frac * cfg.steps as f64).ceil() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = cfg.steps.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

/// Adam with decoupled weight decay, applied to tensors of rank ≥ 2.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
            let (pd, gd) = (p.data_mut(), g.data());
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}
