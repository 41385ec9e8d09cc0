//! First-order optimizers over a [`ParamStore`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

fn check_grads(store: &ParamStore) -> Result<()> {
    match store.iter().find(|p| p.trainable && p.grad.is_none()) {
        Some(p) => Err(Error::MissingGrad(p.name.clone())),
        None => Ok(()),
    }
}

/// Which optimizer a training stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Optimizer chosen at runtime.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(lr, momentum, weight_decay)),
            OptimizerKind::Adam => Self::Adam(Adam::new(lr)),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Sgd(o) => o.lr = lr,
            Self::Adam(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(store),
            Self::Adam(o) => o.step(store),
        }
    }
}

/// SGD with heavy-ball momentum. Weight decay applies to parameters whose
/// name ends in `.weight`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let wd = if p.name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            let n = p.tensor.numel();
            let vel = self.velocity.entry(id).or_insert_with(|| vec![0.0; n]);
            if vel.len() != n {
                *vel = vec![0.0; n];
            }
            let gd = grad.data();
            let data = p.tensor.data_mut();
            for i in 0..n {
                vel[i] = self.momentum * vel[i] + gd[i] + wd * data[i];
                data[i] -= self.lr * vel[i];
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every trainable parameter from its gradient.
    ///
    /// All trainable parameters must carry a gradient; the check runs before
    /// any update so a failed step leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = p.tensor.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                // shape changed (pruning/expansion): restart the moments
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let gd = grad.data();
            let data = p.tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(v), true);
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0, 1.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s).unwrap();
        let w = s.scalar("w").unwrap();
        // bias-corrected first step: lr * 1 / (1 + eps)
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut s = one_param(0.5, 0.0);
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.scalar("w").unwrap(), 0.5);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), true);
        s.insert("frozen", Tensor::scalar(1.0), false);
        let err = Adam::new(0.1).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = ParamStore::new();
        let id = s.insert("f", Tensor::scalar(1.0), false);
        s.get_mut(id).grad = Some(Tensor::scalar(5.0));
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.scalar("f").unwrap(), 1.0);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = one_param(1.0, 1.0);
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        sgd.step(&mut s).unwrap();
        assert!((s.scalar("w").unwrap() - 0.9).abs() < 1e-12);
        sgd.step(&mut s).unwrap();
        // velocity 0.9 * 1 + 1
        assert!((s.scalar("w").unwrap() - (0.9 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only_on_weights() {
        let mut s = ParamStore::new();
        let w = s.insert("c.weight", Tensor::scalar(2.0), true);
        let b = s.insert("c.bias", Tensor::scalar(2.0), true);
        s.get_mut(w).grad = Some(Tensor::scalar(0.0));
        s.get_mut(b).grad = Some(Tensor::scalar(0.0));
        Sgd::new(0.5, 0.0, 0.1).step(&mut s).unwrap();
        assert!((s.scalar("c.weight").unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(s.scalar("c.bias").unwrap(), 2.0);
    }

    #[test]
    fn two_steps_reduce_quadratic() {
        let f = |w: f64| w * w;
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(1.0), true);
        let mut adam = Adam::new(0.1);
        let mut prev = f(1.0);
        for _ in 0..2 {
            let w = s.scalar("w").unwrap();
            s.get_mut(id).grad = Some(Tensor::scalar(2.0 * w));
            adam.step(&mut s).unwrap();
            let now = f(s.scalar("w").unwrap());
            assert!(now < prev);
            prev = now;
        }
    }
}
