//! Width morphing under a macro bitline budget: sparsify batchnorm scales
//! with a parameter-count penalty, prune the dead channels, then scale all
//! widths by one ratio until the budget is hit.

mod expansion;
mod regularizer;
mod resize;

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use expansion::{
    expand_model, find_expansion_ratio, find_shrink_ratio, shrink_model, ConvShape, RatioSearch, WidthProfile,
};
pub use regularizer::{gamma_coefficients, regularizer_f, regularizer_var, space_mask};
pub use resize::{batchnorm_masks, grow_channels, keep_top_gamma, prune_zero_gamma, select_channels};

use crate::config::MacroConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mapper::MappingPlan;
use crate::model::{save_checkpoint, ForwardOptions, ModelGraph};
use crate::train::{evaluate, train, EpochLog, ExtraLoss, TrainConfig};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphConfig {
    /// Final weight of the regularizer in the shrink loss.
    pub lambda_max: f64,
    /// Epochs over which the weight ramps linearly up from zero.
    pub ramp_epochs: usize,
    /// Channels with `|γ| ≤ tau` are pruned.
    pub tau: f64,
    pub target_bl: usize,
    pub ratio_step: f64,
    pub max_ratio: f64,
    pub iterations: usize,
    pub shrink: TrainConfig,
    pub finetune: TrainConfig,
    /// Fine-tune after every iteration rather than only after the last.
    pub finetune_each_iteration: bool,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            lambda_max: 1e-5,
            ramp_epochs: 5,
            tau: 1e-2,
            target_bl: 0,
            ratio_step: 0.001,
            max_ratio: 64.0,
            iterations: 3,
            shrink: TrainConfig {
                epochs: 15,
                lr: 0.05,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 10,
                lr: 0.01,
                ..TrainConfig::default()
            },
            finetune_each_iteration: true,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be >= 0, got {}", self.lambda_max));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.ratio_step > 0.0 && self.ratio_step.is_finite()) {
            return bad(format!("ratio_step must be > 0, got {}", self.ratio_step));
        }
        if !(self.max_ratio >= 1.0) {
            return bad(format!("max_ratio must be >= 1, got {}", self.max_ratio));
        }
        Ok(())
    }

    /// Regularizer weight during `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            self.lambda_max
        } else {
            self.lambda_max * (epoch as f64 / self.ramp_epochs as f64).min(1.0)
        }
    }
}

/// Forward options used throughout morphing: float arithmetic, with the
/// seed's activation quantizers applied when present.
pub fn morph_forward<'a>(model: &ModelGraph, cfg: &'a MacroConfig) -> ForwardOptions<'a> {
    let act = model.layers.iter().any(|l| l.quant.act.is_some());
    ForwardOptions {
        train_bn: true,
        act_quant: act,
        macro_cfg: Some(cfg),
        ..Default::default()
    }
}

fn eval_forward<'a>(model: &ModelGraph, cfg: &'a MacroConfig) -> ForwardOptions<'a> {
    ForwardOptions {
        train_bn: false,
        ..morph_forward(model, cfg)
    }
}

/// Activation steps belong to the seed and stay fixed from here on.
fn freeze_act_steps(model: &mut ModelGraph) {
    for p in model.params.iter_mut() {
        if p.name.ends_with(".act_step") {
            p.trainable = false;
        }
    }
}

/// `(below, total)` count of batchnorm scales with `|γ| ≤ tau`.
pub fn gamma_sparsity(model: &ModelGraph, tau: f64) -> (usize, usize) {
    let mut below = 0;
    let mut total = 0;
    for p in model.params.iter().filter(|p| p.name.ends_with(".gamma")) {
        total += p.tensor.numel();
        below += p.tensor.data().iter().filter(|v| v.abs() <= tau).count();
    }
    (below, total)
}

/// Train with `CE + λ(epoch) · F`; the live-channel counts inside `F` are
/// refreshed at the start of every epoch.
pub fn shrink_train(
    model: &mut ModelGraph,
    cfg: &MorphConfig,
    macro_cfg: &MacroConfig,
    data: &Dataset,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    freeze_act_steps(model);
    let mut coef = gamma_coefficients(model, cfg.tau)?;
    let mut epoch_seen = usize::MAX;
    let tau = cfg.tau;
    let mut extra = |g: &mut crate::autograd::Graph,
                     b: &mut crate::autograd::ParamBinder,
                     m: &ModelGraph,
                     p: crate::train::Progress|
     -> Result<Option<crate::autograd::Var>> {
        let lambda = cfg.lambda_at(p.epoch);
        if lambda == 0.0 {
            return Ok(None);
        }
        if p.epoch != epoch_seen {
            coef = gamma_coefficients(m, tau)?;
            epoch_seen = p.epoch;
        }
        let f = regularizer_var(g, b, m, &coef)?;
        Ok(Some(g.scale(f, lambda)))
    };
    let fwd = morph_forward(model, macro_cfg);
    let extra: &mut ExtraLoss = &mut extra;
    train(model, data, &cfg.shrink, &fwd, rng, Some(extra))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphSnapshot {
    pub params: usize,
    pub used_bls: usize,
    pub macro_usage: Option<f64>,
    pub widths: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphIteration {
    pub iteration: usize,
    pub gamma_below_tau: usize,
    pub gamma_total: usize,
    pub pruned: MorphSnapshot,
    /// Scaling applied after pruning; below 1 when the pruned model was still over budget.
    pub ratio: f64,
    pub result: MorphSnapshot,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphReport {
    pub target_bl: usize,
    pub seed: MorphSnapshot,
    pub iterations: Vec<MorphIteration>,
}

impl MorphReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_snapshot(&self) -> &MorphSnapshot {
        self.iterations.last().map(|i| &i.result).unwrap_or(&self.seed)
    }
}

fn snapshot(model: &ModelGraph, macro_cfg: &MacroConfig, target_bl: usize, test: &Dataset) -> Result<MorphSnapshot> {
    let plan = MappingPlan::build(model, macro_cfg)?;
    Ok(MorphSnapshot {
        params: model.param_count().total(),
        used_bls: plan.used_bitlines(),
        macro_usage: plan.macro_usage(target_bl).ok(),
        widths: model.conv_widths(),
        accuracy: evaluate(model, test, &eval_forward(model, macro_cfg))?,
    })
}

/// Repeat shrink → prune → rescale → fine-tune `cfg.iterations` times.
/// With `checkpoint_dir`, each iteration's model is written there as
/// `morph_iter{n}.ckpt`.
pub fn morph_iterate(
    model: &ModelGraph,
    cfg: &MorphConfig,
    macro_cfg: &MacroConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    rng: &mut Rng,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelGraph, MorphReport)> {
    cfg.validate()?;
    let min_bl = WidthProfile::from_model(model)?.min_bitlines(macro_cfg)?;
    if cfg.target_bl < min_bl {
        return Err(Error::InvalidArgument(format!(
            "target_bl {} is below the minimum mappable width of {min_bl} bitlines",
            cfg.target_bl
        )));
    }
    let mut report = MorphReport {
        target_bl: cfg.target_bl,
        seed: snapshot(model, macro_cfg, cfg.target_bl, test_set)?,
        iterations: Vec::new(),
    };
    let mut current = model.clone();
    freeze_act_steps(&mut current);
    for it in 0..cfg.iterations {
        shrink_train(&mut current, cfg, macro_cfg, train_set, rng)?;
        let (gamma_below_tau, gamma_total) = gamma_sparsity(&current, cfg.tau);
        let (pruned, mut warnings) = prune_zero_gamma(&current, cfg.tau)?;
        let pruned_snap = snapshot(&pruned, macro_cfg, cfg.target_bl, test_set)?;
        let profile = WidthProfile::from_model(&pruned)?;
        let search = find_expansion_ratio(&profile, macro_cfg, cfg.target_bl, cfg.ratio_step, cfg.max_ratio)?;
        warnings.extend(search.warnings.iter().cloned());
        let (mut next, ratio) = if search.over_budget {
            let r = find_shrink_ratio(&profile, macro_cfg, cfg.target_bl, cfg.ratio_step)?.ok_or_else(|| {
                Error::InvalidArgument(format!("no width scaling fits {} bitlines", cfg.target_bl))
            })?;
            let msg = format!("pruned model over budget; shrinking widths uniformly by {r:.3}");
            warn!("{msg}");
            warnings.push(msg);
            (shrink_model(&pruned, r)?, r)
        } else {
            (expand_model(&pruned, search.ratio, rng)?, search.ratio)
        };
        let last = it + 1 == cfg.iterations;
        if cfg.finetune_each_iteration || last {
            let fwd = morph_forward(&next, macro_cfg);
            train(&mut next, train_set, &cfg.finetune, &fwd, rng, None)?;
        }
        let result = snapshot(&next, macro_cfg, cfg.target_bl, test_set)?;
        info!(
            "morph iteration {}: {} -> {} bitlines (R = {ratio:.3}), accuracy {:.4}",
            it + 1,
            pruned_snap.used_bls,
            result.used_bls,
            result.accuracy
        );
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&next, dir.join(format!("morph_iter{}.ckpt", it + 1)))?;
        }
        report.iterations.push(MorphIteration {
            iteration: it + 1,
            gamma_below_tau,
            gamma_total,
            pruned: pruned_snap,
            ratio,
            result,
            warnings,
        });
        current = next;
    }
    Ok((current, report))
}
