//! Mini-batch training and evaluation shared by every stage.

use log::info;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Optimizer, OptimizerKind, ParamBinder, Var};
use crate::data::{ordered_batches, shuffled_batches, Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, mean_name, var_name, ForwardOptions, ModelGraph};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    pub augment: Option<Augment>,
    /// Weight of the newest batch in the running batchnorm statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
            augment: None,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine && self.epochs > 1 {
            let t = epoch as f64 / self.epochs as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}

/// Where in the run a step is, passed to extra loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    pub epochs: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
}

impl Progress {
    /// Fraction of the run completed before this step, in `[0, 1)`.
    pub fn fraction(&self) -> f64 {
        let total = (self.epochs * self.steps_per_epoch).max(1);
        (self.epoch * self.steps_per_epoch + self.step) as f64 / total as f64
    }
}

/// Additional scalar loss recorded on the same graph as the forward pass.
pub type ExtraLoss<'a> =
    dyn FnMut(&mut Graph, &mut ParamBinder, &ModelGraph, Progress) -> Result<Option<Var>> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn update_running_stats(model: &mut ModelGraph, stats: &[(usize, crate::autograd::BatchStats)], m: f64) -> Result<()> {
    for (idx, st) in stats {
        let name = model.layers[*idx].name.clone();
        let n = st.count as f64;
        let unbias = if st.count > 1 { n / (n - 1.0) } else { 1.0 };
        let mid = model.params.id(&mean_name(&name))?;
        for (r, b) in model.params.get_mut(mid).tensor.data_mut().iter_mut().zip(&st.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let vid = model.params.id(&var_name(&name))?;
        for (r, b) in model.params.get_mut(vid).tensor.data_mut().iter_mut().zip(&st.var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
    Ok(())
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Train the trainable parameters of `model` in place.
///
/// `fwd` selects the arithmetic; batch statistics are used whenever
/// `fwd.train_bn` is set and the running estimates are updated from them.
pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    fwd: &ForwardOptions,
    rng: &mut Rng,
    mut extra: Option<&mut ExtraLoss>,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let batches = shuffled_batches(data.len(), cfg.batch_size, rng);
        let steps = batches.len();
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, idx) in batches.iter().enumerate() {
            let (mut xb, yb) = data.batch(idx);
            if let Some(a) = &cfg.augment {
                a.apply(&mut xb, rng);
            }
            let mut g = Graph::new();
            let mut binder = ParamBinder::new();
            let x = g.constant(xb);
            let out = forward(&mut g, model, &mut binder, x, fwd)?;
            let ce = g.cross_entropy(out.logits, &yb)?;
            hits += correct(g.value(out.logits), &yb);
            let mut loss = ce;
            if let Some(f) = extra.as_mut() {
                let p = Progress {
                    epoch,
                    epochs: cfg.epochs,
                    step,
                    steps_per_epoch: steps,
                };
                if let Some(t) = f(&mut g, &mut binder, model, p)? {
                    loss = g.add_scalars(&[ce, t])?;
                }
            }
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            loss_sum += lv * idx.len() as f64;
            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            opt.step(&mut model.params)?;
            update_running_stats(model, &out.bn_stats, cfg.bn_momentum)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
        };
        info!(
            "{} epoch {}/{}: loss {:.4} train acc {:.4}",
            model.name,
            epoch + 1,
            cfg.epochs,
            log.loss,
            log.train_accuracy
        );
        logs.push(log);
    }
    model.params.zero_grad();
    Ok(logs)
}

/// Logits for a batch without recording gradients; batchnorm uses running statistics.
pub fn predict(model: &ModelGraph, x: Tensor, fwd: &ForwardOptions) -> Result<Tensor> {
    let opts = ForwardOptions { train_bn: false, ..*fwd };
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = forward(&mut g, model, &mut ParamBinder::frozen(), xv, &opts)?;
    Ok(g.value(out.logits).clone())
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &ModelGraph, data: &Dataset, fwd: &ForwardOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut hits = 0;
    for idx in ordered_batches(data.len(), 100) {
        let (x, y) = data.batch(&idx);
        hits += correct(&predict(model, x, fwd)?, &y);
    }
    Ok(hits as f64 / data.len() as f64)
}
