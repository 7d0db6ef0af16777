//! AdamW with decoupled weight decay, warmup-then-cosine schedule, and global-norm clipping.

use std::collections::BTreeMap;

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Plain Adam (no decay).
    pub fn adam() -> Self {
        Self::new(0.0)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. `decays(name)` selects
    /// the parameters weight decay applies to.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &GradientMap, lr: f64, decays: impl Fn(&str) -> bool) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let updated = self.update(name, p.data(), g.data(), lr, bc1, bc2, decays(name))?;
            *p = Tensor::new(p.shape().to_vec(), updated)?;
        }
        Ok(())
    }

    /// Update a single free-standing tensor under `name` (attack dummies).
    pub fn step_one(&mut self, name: &str, value: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let updated = self.update(name, value.data(), grad.data(), lr, bc1, bc2, false)?;
        Tensor::new(value.shape().to_vec(), updated)
    }

    #[allow(clippy::too_many_arguments)]
    fn update(&mut self, name: &str, p: &[f64], g: &[f64], lr: f64, bc1: f64, bc2: f64, decay: bool) -> Result<Vec<f64>> {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                actual: g.len(),
                context: "optimizer gradient",
            });
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        let wd = if decay { self.weight_decay } else { 0.0 };
        let mut out = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            out.push(p[i] - lr * (mhat / (vhat.sqrt() + self.eps) + wd * p[i]));
        }
        Ok(out)
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then cosine decay to 0.
pub fn warmup_cosine(step: usize, total: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let warm = ((total as f64) * warmup_frac).round() as usize;
    if step < warm {
        return base_lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescale `grads` so their global ℓ₂ norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        *grads = grads.scaled(max_norm / norm);
    }
    norm
}
