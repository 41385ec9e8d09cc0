//! Weight-to-macro mapping and hardware metrics.
//!
//! Each conv filter is cut into bitline segments of at most
//! `channels_per_bitline` input channels (all `k x k` taps of a channel stay
//! on one bitline). A layer occupies `segments * out_channels` columns,
//! ordered segment-major: column `s * out_channels + o` holds segment `s` of
//! filter `o`. Layers are packed greedily, in layer order, into tiles of
//! `bitlines_per_macro` columns; each tile is one macro load.

mod render;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use render::{render_mapping, Raster};

use crate::config::{channels_per_bitline, MacroConfig};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph};

/// Channel ranges of consecutive segments: full segments of `cpb` channels, then the remainder.
pub fn segment_ranges(in_channels: usize, cpb: usize) -> Vec<Range<usize>> {
    (0..in_channels.div_ceil(cpb))
        .map(|s| s * cpb..((s + 1) * cpb).min(in_channels))
        .collect()
}

/// Segmentation of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub kernel_size: usize,
    pub out_channels: usize,
    /// Input channels held by each segment.
    pub segment_channels: Vec<usize>,
    /// Wordlines used by each segment's columns.
    pub rows_used: Vec<usize>,
}

impl Segmentation {
    pub fn segments(&self) -> usize {
        self.segment_channels.len()
    }

    pub fn columns(&self) -> usize {
        self.segments() * self.out_channels
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.segment_channels
            .iter()
            .map(|&c| {
                start += c;
                start - c..start
            })
            .collect()
    }

    /// Wordlines used by layer-local column `col`.
    pub fn rows_of_column(&self, col: usize) -> usize {
        self.rows_used[col / self.out_channels]
    }
}

pub fn segment_layer(layer: &Layer, macro_cfg: &MacroConfig) -> Result<Segmentation> {
    let spec = layer.conv().ok_or_else(|| Error::NotConv {
        layer: layer.name.clone(),
    })?;
    let cpb = channels_per_bitline(macro_cfg, spec.kernel_size)?;
    let k2 = spec.kernel_size * spec.kernel_size;
    let segment_channels: Vec<usize> = segment_ranges(spec.in_channels, cpb).iter().map(|r| r.len()).collect();
    Ok(Segmentation {
        kernel_size: spec.kernel_size,
        out_channels: spec.out_channels,
        rows_used: segment_channels.iter().map(|c| c * k2).collect(),
        segment_channels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    pub layer: usize,
    pub name: String,
    pub segmentation: Segmentation,
    pub out_h: usize,
    pub out_w: usize,
    /// First global column index.
    pub first_column: usize,
}

impl LayerMapping {
    pub fn columns(&self) -> usize {
        self.segmentation.columns()
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Number of this layer's columns in each tile it touches, as `(tile, count)`.
    pub fn tile_columns(&self, bitlines: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        let (start, end) = (self.first_column, self.first_column + self.columns());
        let mut c = start;
        while c < end {
            let tile = c / bitlines;
            let tile_end = ((tile + 1) * bitlines).min(end);
            out.push((tile, tile_end - c));
            c = tile_end;
        }
        out
    }

    /// Whether some filter has segments in different tiles, so its partial
    /// sums must be held between macro loads.
    pub fn spans_loads(&self, bitlines: usize) -> bool {
        let seg = &self.segmentation;
        if seg.segments() < 2 {
            return false;
        }
        (0..seg.out_channels).any(|o| {
            let tile = |s: usize| (self.first_column + s * seg.out_channels + o) / bitlines;
            (1..seg.segments()).any(|s| tile(s) != tile(0))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub macro_cfg: MacroConfig,
    pub input_resolution: usize,
    pub layers: Vec<LayerMapping>,
}

impl MappingPlan {
    pub fn build(model: &ModelGraph, macro_cfg: &MacroConfig) -> Result<Self> {
        Self::build_at(model, macro_cfg, model.input_resolution)
    }

    pub fn build_at(model: &ModelGraph, macro_cfg: &MacroConfig, resolution: usize) -> Result<Self> {
        let shapes = model.infer_shapes_at(resolution)?;
        let mut layers = Vec::new();
        let mut cursor = 0;
        for i in model.conv_indices() {
            let segmentation = segment_layer(&model.layers[i], macro_cfg)?;
            let cols = segmentation.columns();
            layers.push(LayerMapping {
                layer: i,
                name: model.layers[i].name.clone(),
                segmentation,
                out_h: shapes[i].1,
                out_w: shapes[i].2,
                first_column: cursor,
            });
            cursor += cols;
        }
        Ok(Self {
            macro_cfg: *macro_cfg,
            input_resolution: resolution,
            layers,
        })
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerMapping> {
        self.layers.iter().find(|l| l.layer == idx)
    }

    pub fn used_bitlines(&self) -> usize {
        self.layers.iter().map(LayerMapping::columns).sum()
    }

    /// Number of macro loads; an empty plan still shows one (blank) tile.
    pub fn tile_count(&self) -> usize {
        self.used_bitlines().div_ceil(self.macro_cfg.bitlines_per_macro()).max(1)
    }

    pub fn load_weight_latency(&self) -> usize {
        load_weight_latency(self.used_bitlines(), &self.macro_cfg)
    }

    /// One conversion per column per output position.
    pub fn adc_activations(&self) -> usize {
        self.layers.iter().map(|l| l.positions() * l.columns()).sum()
    }

    /// Each output position of a layer needs one ADC pass per `adc_count`
    /// columns the layer has in a tile, counted per tile.
    pub fn computing_latency(&self) -> usize {
        let bl = self.macro_cfg.bitlines_per_macro();
        let adc = self.macro_cfg.adc_count();
        self.layers
            .iter()
            .flat_map(|l| {
                l.tile_columns(bl)
                    .into_iter()
                    .map(move |(_, cols)| l.positions() * cols.div_ceil(adc))
            })
            .sum()
    }

    /// Largest partial-sum buffer, in bits, over layers whose filters are
    /// split across macro loads.
    pub fn partial_sum_storage(&self, word_bits: u32) -> usize {
        let bl = self.macro_cfg.bitlines_per_macro();
        self.layers
            .iter()
            .filter(|l| l.spans_loads(bl))
            .map(|l| l.positions() * l.segmentation.out_channels * word_bits as usize)
            .max()
            .unwrap_or(0)
    }

    /// Fraction of the cells of `target_bl` bitlines holding weights.
    pub fn macro_usage(&self, target_bl: usize) -> Result<f64> {
        let cells: usize = self
            .layers
            .iter()
            .map(|l| {
                let s = &l.segmentation;
                s.rows_used.iter().sum::<usize>() * s.out_channels
            })
            .sum();
        if cells == 0 {
            return Ok(0.0);
        }
        let usage = cells as f64 / (target_bl as f64 * self.macro_cfg.wordlines() as f64);
        if usage > 1.0 || target_bl == 0 {
            return Err(Error::PlanExceedsBudget { usage, target_bl });
        }
        Ok(usage)
    }

    pub fn report(&self, model: &ModelGraph, target_bl: Option<usize>, psum_word_bits: u32) -> Result<PlanReport> {
        let bl = self.used_bitlines();
        Ok(PlanReport {
            model: model.name.clone(),
            input_resolution: self.input_resolution,
            target_bl,
            metrics: PlanMetrics {
                params_m: model.param_count().conv as f64 / 1e6,
                bls: bl,
                macro_usage: match target_bl {
                    Some(t) => Some(self.macro_usage(t)?),
                    None => None,
                },
                macs: self.adc_activations(),
                load_weight_latency: self.load_weight_latency(),
                computing_latency: self.computing_latency(),
                partial_sum_storage: self.partial_sum_storage(psum_word_bits),
            },
            tiles: self.tile_count(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerReport {
                    name: l.name.clone(),
                    segments: l.segmentation.segments(),
                    columns: l.columns(),
                    rows_used: l.segmentation.rows_used.clone(),
                    out_hw: [l.out_h, l.out_w],
                    first_column: l.first_column,
                })
                .collect(),
        })
    }
}

/// Total columns of the model's convs.
pub fn used_bitlines(model: &ModelGraph, macro_cfg: &MacroConfig) -> Result<usize> {
    model
        .conv_indices()
        .iter()
        .map(|&i| segment_layer(&model.layers[i], macro_cfg).map(|s| s.columns()))
        .sum()
}

/// Cycles to load `used_bls` columns: one full macro write per tile.
pub fn load_weight_latency(used_bls: usize, macro_cfg: &MacroConfig) -> usize {
    let bl = macro_cfg.bitlines_per_macro();
    used_bls.div_ceil(bl) * bl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    /// Conv weight count in millions.
    #[serde(rename = "Param (M)")]
    pub params_m: f64,
    #[serde(rename = "BLs")]
    pub bls: usize,
    #[serde(rename = "Macro Usage", skip_serializing_if = "Option::is_none")]
    pub macro_usage: Option<f64>,
    #[serde(rename = "MACs")]
    pub macs: usize,
    #[serde(rename = "Load Weight Latency")]
    pub load_weight_latency: usize,
    #[serde(rename = "Computing Latency")]
    pub computing_latency: usize,
    #[serde(rename = "Partial sum Storage")]
    pub partial_sum_storage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub segments: usize,
    pub columns: usize,
    pub rows_used: Vec<usize>,
    pub out_hw: [usize; 2],
    pub first_column: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub model: String,
    pub input_resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_bl: Option<usize>,
    pub metrics: PlanMetrics,
    pub tiles: usize,
    pub layers: Vec<LayerReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_cnn, vgg, vgg16, vgg9, ConvSpec, LayerKind, VggItem};
    use crate::rng;

    fn mc() -> MacroConfig {
        MacroConfig::default()
    }

    fn conv(cin: usize, cout: usize) -> Layer {
        Layer::new("c", LayerKind::Conv(ConvSpec::new(cin, cout, 3)))
    }

    #[test]
    fn segment_examples() {
        let s = segment_layer(&conv(56, 4), &mc()).unwrap();
        assert_eq!(s.segment_channels, vec![28, 28]);
        assert_eq!(segment_layer(&conv(28, 4), &mc()).unwrap().segments(), 1);
        let s = segment_layer(&conv(3, 4), &mc()).unwrap();
        assert_eq!((s.segments(), s.rows_used.clone()), (1, vec![27]));
        let s = segment_layer(&conv(29, 10), &mc()).unwrap();
        assert_eq!(s.columns(), 20);
        assert_eq!(s.segment_channels, vec![28, 1]);
        let relu = Layer::new("r", LayerKind::Relu);
        assert!(matches!(segment_layer(&relu, &mc()), Err(Error::NotConv { .. })));
    }

    #[test]
    fn kernel_too_deep() {
        let l = Layer::new("c", LayerKind::Conv(ConvSpec::new(3, 4, 17)));
        assert!(matches!(segment_layer(&l, &mc()), Err(Error::KernelExceedsDepth { .. })));
    }

    /// Hand enumeration: count channels bitline by bitline.
    fn enumerate_columns(cin: usize, cout: usize, cpb: usize) -> usize {
        let mut cols = 0;
        for _ in 0..cout {
            let mut left = cin;
            while left > 0 {
                left -= left.min(cpb);
                cols += 1;
            }
        }
        cols
    }

    #[test]
    fn toy_cnn_bitlines() {
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        let oracle: usize = [(3, 16), (16, 32), (32, 64), (64, 64)]
            .iter()
            .map(|&(i, o)| enumerate_columns(i, o, 28))
            .sum();
        assert_eq!(oracle, 368);
        assert_eq!(used_bitlines(&m, &mc()).unwrap(), oracle);
        let plan = MappingPlan::build(&m, &mc()).unwrap();
        assert_eq!(plan.used_bitlines(), 368);
        assert_eq!(plan.tile_count(), 2);
        assert_eq!(plan.load_weight_latency(), 512);
    }

    #[test]
    fn load_latency_examples() {
        assert_eq!(load_weight_latency(8186, &mc()), 8192);
        assert_eq!(load_weight_latency(38592, &mc()), 38656);
        assert_eq!(load_weight_latency(511, &mc()), 512);
        assert_eq!(load_weight_latency(0, &mc()), 0);
    }

    #[test]
    fn vgg_baselines() {
        let m = vgg9(3, 32, 10, &mut rng(0)).unwrap();
        let plan = MappingPlan::build(&m, &mc()).unwrap();
        assert_eq!(plan.used_bitlines(), 38592);
        assert_eq!(plan.load_weight_latency(), 38656);
        assert_eq!(plan.adc_activations(), 724_992);
        assert_eq!(plan.partial_sum_storage(5), 163_840);
        let m = vgg16(3, 32, 10, &mut rng(0)).unwrap();
        assert_eq!(used_bitlines(&m, &mc()).unwrap(), 61440);
    }

    fn one_layer(cin: usize, cout: usize, res: usize) -> MappingPlan {
        let m = vgg("one", &[VggItem::Conv(cout)], cin, res, 2, &mut rng(0)).unwrap();
        MappingPlan::build(&m, &mc()).unwrap()
    }

    #[test]
    fn adc_activation_examples() {
        assert_eq!(one_layer(3, 8, 4).adc_activations(), 128);
        let p = one_layer(3, 1, 1);
        assert_eq!(p.adc_activations(), 1);
    }

    /// Brute force: walk tiles, fire ADC groups of `adc_count` columns per position.
    fn brute_cycles(plan: &MappingPlan) -> usize {
        let bl = plan.macro_cfg.bitlines_per_macro();
        let mut cycles = 0;
        for tile in 0..plan.tile_count() {
            for l in &plan.layers {
                let cols: Vec<usize> = (l.first_column..l.first_column + l.columns())
                    .filter(|c| c / bl == tile)
                    .collect();
                if cols.is_empty() {
                    continue;
                }
                for _pos in 0..l.positions() {
                    let mut left = cols.len();
                    while left > 0 {
                        left = left.saturating_sub(plan.macro_cfg.adc_count());
                        cycles += 1;
                    }
                }
            }
        }
        cycles
    }

    #[test]
    fn computing_latency_examples() {
        assert_eq!(one_layer(3, 64, 10).computing_latency(), 100);
        let p = one_layer(3, 65, 10);
        assert_eq!(p.computing_latency(), 200);
        assert_eq!(brute_cycles(&p), 200);
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        let p = MappingPlan::build(&m, &mc()).unwrap();
        assert_eq!(p.computing_latency(), brute_cycles(&p));
        assert!(p.computing_latency() * 64 >= p.adc_activations());
    }

    #[test]
    fn psum_storage() {
        assert_eq!(one_layer(3, 8, 4).partial_sum_storage(5), 0);
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        let p = MappingPlan::build(&m, &mc()).unwrap();
        // conv4 (3 segments of 64 columns from column 176) crosses into tile 2
        assert_eq!(p.partial_sum_storage(5), 4 * 4 * 64 * 5);
        assert_eq!(p.adc_activations(), 4096 + 2048 + 2048 + 3072);
    }

    #[test]
    fn usage_examples() {
        let p = one_layer(28, 1, 4);
        assert_eq!(p.macro_usage(1).unwrap(), 252.0 / 256.0);
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        let p = MappingPlan::build(&m, &mc()).unwrap();
        // cell enumeration: each column contributes channels * 9 cells
        let mut cells = 0;
        for (cin, cout) in [(3usize, 16usize), (16, 32), (32, 64), (64, 64)] {
            for _ in 0..cout {
                cells += cin * 9;
            }
        }
        let u = p.macro_usage(368).unwrap();
        assert!((u - cells as f64 / (368.0 * 256.0)).abs() < 1e-15);
        let err = p.macro_usage(100).unwrap_err().to_string();
        assert!(err.contains("plan exceeds budget"), "{err}");
    }

    #[test]
    fn report_json_keys() {
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        let p = MappingPlan::build(&m, &mc()).unwrap();
        let r = p.report(&m, Some(368), 5).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        for key in ["\"BLs\":368", "\"Load Weight Latency\":512", "\"Partial sum Storage\":5120"] {
            assert!(s.contains(key), "{s}");
        }
    }
}
