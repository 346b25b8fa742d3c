//! Parameter vectors and first-order optimizers.

use std::f64::consts::PI;

use crate::autodiff::Tensor;

/// An ordered list of parameter tensors, treated as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec(pub Vec<Tensor>);

impl ParamVec {
    pub fn zeros_like(other: &ParamVec) -> Self {
        ParamVec(other.0.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(Tensor::numel).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.dot(b)).sum()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVec) {
        assert_eq!(self.0.len(), other.0.len(), "ParamVec length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.axpy(scale, b);
        }
    }

    /// `self + scale * other` as a new vector.
    pub fn added(&self, scale: f64, other: &ParamVec) -> ParamVec {
        let mut out = self.clone();
        out.axpy(scale, other);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// SGD with heavy-ball momentum (`momentum = 0` gives plain SGD).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<ParamVec>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamVec, grads: &ParamVec, lr: f64) {
        if self.momentum == 0.0 {
            params.axpy(-lr, grads);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| ParamVec::zeros_like(grads));
        for (vt, gt) in v.0.iter_mut().zip(&grads.0) {
            for (vv, gv) in vt.data_mut().iter_mut().zip(gt.data()) {
                *vv = self.momentum * *vv + gv;
            }
        }
        params.axpy(-lr, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParamVec(vec![Tensor::scalar(0.0)]);
        let g = ParamVec(vec![Tensor::scalar(1.0)]);
        let mut opt = Sgd::new(0.9);
        opt.step(&mut p, &g, 1.0);
        opt.step(&mut p, &g, 1.0);
        assert!((p.0[0].item() + 2.9).abs() < 1e-15);
    }
}
