//! Proportional width scaling under a bitline budget.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::resize::{grow_channels, keep_top_gamma};
use crate::config::{channels_per_bitline, MacroConfig};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, SpaceId};
use crate::qat::round_half_away;
use crate::Rng;

/// One conv as seen by the budget: which widths it reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub input: usize,
    pub output: usize,
    pub kernel_size: usize,
}

/// Widths of every channel space plus the convs connecting them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WidthProfile {
    pub widths: Vec<usize>,
    /// Spaces whose width never scales (the image input).
    pub fixed: Vec<bool>,
    pub convs: Vec<ConvShape>,
}

impl WidthProfile {
    pub fn from_model(model: &ModelGraph) -> Result<Self> {
        let spaces = model.spaces()?;
        let convs = model
            .conv_indices()
            .into_iter()
            .map(|i| {
                Ok(ConvShape {
                    input: spaces.source_space(model, i).expect("conv input"),
                    output: spaces.of_layer(i).expect("conv output"),
                    kernel_size: model.conv_spec(i)?.kernel_size,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            widths: spaces.spaces.iter().map(|s| s.channels).collect(),
            fixed: spaces.spaces.iter().map(|s| s.is_input).collect(),
            convs,
        })
    }

    /// A plain conv chain: `channels[0]` is the fixed input, conv `i` maps
    /// `channels[i]` to `channels[i + 1]` with `kernels[i]`.
    pub fn chain(channels: &[usize], kernels: &[usize]) -> Result<Self> {
        if channels.len() != kernels.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} channel counts for {} kernels",
                channels.len(),
                kernels.len()
            )));
        }
        Ok(Self {
            widths: channels.to_vec(),
            fixed: (0..channels.len()).map(|i| i == 0).collect(),
            convs: kernels
                .iter()
                .enumerate()
                .map(|(i, &k)| ConvShape {
                    input: i,
                    output: i + 1,
                    kernel_size: k,
                })
                .collect(),
        })
    }

    /// Widths after scaling every free space by `ratio`, at least one channel each.
    pub fn scaled(&self, ratio: f64) -> Vec<usize> {
        self.widths
            .iter()
            .zip(&self.fixed)
            .map(|(&w, &f)| {
                if f {
                    w
                } else {
                    (round_half_away(w as f64 * ratio) as usize).max(1)
                }
            })
            .collect()
    }

    /// Bitlines of a layout with the given widths: each conv takes
    /// `ceil(C_in / cpb(k)) · C_out` columns.
    pub fn bitlines_for(&self, widths: &[usize], cfg: &MacroConfig) -> Result<usize> {
        let mut total = 0;
        for c in &self.convs {
            let cpb = channels_per_bitline(cfg, c.kernel_size)?;
            total += widths[c.input].div_ceil(cpb) * widths[c.output];
        }
        Ok(total)
    }

    pub fn bitlines_at(&self, ratio: f64, cfg: &MacroConfig) -> Result<usize> {
        self.bitlines_for(&self.scaled(ratio), cfg)
    }

    /// Bitlines with every free space at one channel.
    pub fn min_bitlines(&self, cfg: &MacroConfig) -> Result<usize> {
        let ones: Vec<usize> = self
            .widths
            .iter()
            .zip(&self.fixed)
            .map(|(&w, &f)| if f { w } else { 1 })
            .collect();
        self.bitlines_for(&ones, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSearch {
    pub ratio: f64,
    /// Grid index: `ratio = 1 + steps · step`.
    pub steps: usize,
    pub bitlines: usize,
    /// The widths at `ratio = 1` already exceed the budget.
    pub over_budget: bool,
    pub warnings: Vec<String>,
}

fn grid(k: usize, step: f64) -> f64 {
    1.0 + k as f64 * step
}

/// Largest `R` on the grid `1, 1+step, …` (capped at `max_ratio`) whose
/// scaled widths fit in `target_bl` bitlines. The bitline count never
/// decreases with `R`, so the scan stops at the first violation.
pub fn find_expansion_ratio(
    profile: &WidthProfile,
    cfg: &MacroConfig,
    target_bl: usize,
    step: f64,
    max_ratio: f64,
) -> Result<RatioSearch> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("ratio step must be positive, got {step}")));
    }
    if max_ratio < 1.0 {
        return Err(Error::InvalidArgument(format!("ratio cap must be at least 1, got {max_ratio}")));
    }
    let base = profile.bitlines_at(1.0, cfg)?;
    if base > target_bl {
        let msg = format!("no expansion headroom: {base} bitlines at R=1 exceed the target {target_bl}");
        warn!("{msg}");
        return Ok(RatioSearch {
            ratio: 1.0,
            steps: 0,
            bitlines: base,
            over_budget: true,
            warnings: vec![msg],
        });
    }
    let (mut k, mut bitlines) = (0usize, base);
    loop {
        let next = grid(k + 1, step);
        if next > max_ratio + 1e-12 {
            let msg = format!("expansion ratio capped at {max_ratio}");
            warn!("{msg}");
            return Ok(RatioSearch {
                ratio: grid(k, step),
                steps: k,
                bitlines,
                over_budget: false,
                warnings: vec![msg],
            });
        }
        let b = profile.bitlines_at(next, cfg)?;
        if b > target_bl {
            break;
        }
        k += 1;
        bitlines = b;
    }
    Ok(RatioSearch {
        ratio: grid(k, step),
        steps: k,
        bitlines,
        over_budget: false,
        warnings: Vec::new(),
    })
}

/// Largest `R = 1 - k·step < 1` whose widths fit, for models already over budget.
pub fn find_shrink_ratio(profile: &WidthProfile, cfg: &MacroConfig, target_bl: usize, step: f64) -> Result<Option<f64>> {
    if profile.min_bitlines(cfg)? > target_bl {
        return Ok(None);
    }
    let mut k = 1usize;
    loop {
        let r = 1.0 - k as f64 * step;
        if r <= 0.0 {
            return Ok(None);
        }
        if profile.bitlines_at(r, cfg)? <= target_bl {
            return Ok(Some(r));
        }
        k += 1;
    }
}

fn resized_widths(model: &ModelGraph, ratio: f64) -> Result<BTreeMap<SpaceId, usize>> {
    let profile = WidthProfile::from_model(model)?;
    Ok(profile
        .scaled(ratio)
        .into_iter()
        .enumerate()
        .filter(|&(s, _)| !profile.fixed[s])
        .collect())
}

/// Scale every conv output width to `round(C · R)`, `R ≥ 1`.
pub fn expand_model(model: &ModelGraph, ratio: f64, rng: &mut Rng) -> Result<ModelGraph> {
    if !(ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!("expansion ratio must be at least 1, got {ratio}")));
    }
    grow_channels(model, &resized_widths(model, ratio)?, rng)
}

/// Scale widths down to `round(C · R)`, `R < 1`, keeping the largest-|γ| channels.
pub fn shrink_model(model: &ModelGraph, ratio: f64) -> Result<ModelGraph> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("shrink ratio must be in (0, 1], got {ratio}")));
    }
    keep_top_gamma(model, &resized_widths(model, ratio)?)
}
