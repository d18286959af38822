//! AdamW with decoupled weight decay, the learning-rate schedule, and the
//! EMA target update.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

pub const ADAM_EPS: f64 = 1e-8;

/// Weight decay applies to matrices and kernels only; biases, norm affine
/// parameters and the mask token are vectors.
pub fn decays(t: &Tensor) -> bool {
    t.ndim() > 1
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: (f64, f64), weight_decay: f64) -> Self {
        let mut m = ParamStore::new();
        for (n, t) in params.iter() {
            m.insert(n, Tensor::zeros(t.shape()));
        }
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: ADAM_EPS,
            weight_decay,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update of `params` from `grads` (given in `params` order).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        params.check_congruent(&self.m)?;
        if grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: self.t + 1,
                    detail: format!("gradient of `{name}`"),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        let (b1, b2) = (self.beta1, self.beta2);
        for (((_, p), (_, m)), ((_, v), g)) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grads))
        {
            let decay = if decays(p) { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to
/// `min_lr` at `total`.
pub fn lr_at(step: usize, lr: f64, min_lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return min_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    min_lr + (lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// `target ← m·target + (1−m)·online` for every parameter.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, momentum: f64) -> Result<()> {
    target.check_congruent(online)?;
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * ov;
        }
    }
    Ok(())
}
