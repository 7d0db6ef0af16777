//! Ops built from taped primitives. Their gradients (of any order) come for free.

use super::Tape;
use crate::error::{Error, Result};
use crate::tensor::{normalize_axis, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn mean_axis(&mut self, a: &Tensor, axis: isize, keepdim: bool) -> Result<Tensor> {
        let n = a.shape()[normalize_axis(axis, a.ndim())?] as f64;
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(&s, 1.0 / n)
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / n)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let mu = self.mean_axis(x, -1, true)?;
        let xc = self.sub(x, &mu)?;
        let sq = self.mul(&xc, &xc)?;
        let var = self.mean_axis(&sq, -1, true)?;
        let eps = Tensor::scalar(LAYER_NORM_EPS);
        let var = self.add(&var, &eps)?;
        let r = self.rsqrt(&var)?;
        let y = self.mul(&xc, &r)?;
        let y = self.mul(&y, gamma)?;
        self.add(&y, beta)
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let x2 = self.mul(x, x)?;
        let x3 = self.mul(&x2, x)?;
        let cubic = self.scale(&x3, 0.044715)?;
        let inner = self.add(x, &cubic)?;
        let inner = self.scale(&inner, c)?;
        let t = self.tanh(&inner)?;
        let one = Tensor::scalar(1.0);
        let t1 = self.add(&t, &one)?;
        let y = self.mul(x, &t1)?;
        self.scale(&y, 0.5)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        if !x.is_finite() {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let m = x.max_axis(-1, true)?;
        let shifted = self.sub(x, &m)?;
        let e = self.exp(&shifted)?;
        let s = self.sum_axis(&e, -1, true)?;
        let lse = self.log(&s)?;
        self.sub(&shifted, &lse)
    }

    /// Mean cross-entropy of `[B, C]` (or `[C]`) logits against class labels.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let c = *logits.shape().last().ok_or(Error::Empty("logits"))?;
        let b = logits.numel() / c.max(1);
        if labels.len() != b {
            return Err(Error::LengthMismatch {
                expected: b,
                actual: labels.len(),
                context: "cross_entropy labels",
            });
        }
        let mut pick = vec![0.0; b * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    limit: c,
                    context: "cross_entropy label",
                });
            }
            pick[i * c + y] = -1.0 / b as f64;
        }
        let x = self.reshape(logits, &[b, c])?;
        let logp = self.log_softmax(&x)?;
        let w = Tensor::new(vec![b, c], pick)?;
        let nll = self.mul(&logp, &w)?;
        self.sum_all(&nll)
    }
}
