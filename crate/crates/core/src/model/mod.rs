//! Layer-level IR of a CNN and its parameter store.

pub(crate) mod builders;
pub(crate) mod checkpoint;
mod exec;
mod fold;
mod spaces;

use serde::{Deserialize, Serialize};

pub use builders::{
    kaiming_normal, resnet, resnet18, toy_cnn, vgg, vgg16, vgg9, ArchSpec, VggItem, VGG16_CONFIG,
    VGG9_CONFIG,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use exec::{forward, ForwardOptions, ForwardOutput, Precision};
pub use fold::{bn_fold_scale, fold_bn};
pub use spaces::{ChannelSpace, ChannelSpaces, SpaceId};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel_size / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(&self) -> usize {
        self.padding.unwrap_or(self.kernel_size / 2)
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size * self.kernel_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv(ConvSpec),
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { kernel: usize, stride: usize },
    /// Global average pooling.
    #[serde(rename = "avgpool")]
    AvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    ResidualAdd,
}

/// Names of the step-size parameters attached to a conv layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantAttach {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psum: Option<String>,
}

impl QuantAttach {
    pub fn is_empty(&self) -> bool {
        self.act.is_none() && self.weight.is_none() && self.psum.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Producer layer indices. Empty means "the previous layer" (or the
    /// model input for the first layer).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "QuantAttach::is_empty")]
    pub quant: QuantAttach,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: Vec::new(),
            quant: QuantAttach::default(),
        }
    }

    pub fn conv(&self) -> Option<&ConvSpec> {
        match &self.kind {
            LayerKind::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

/// Output shape `(channels, height, width)`; linear outputs use `(features, 1, 1)`.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv: usize,
    pub linear: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.conv + self.linear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_channels: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

pub fn gamma_name(bn: &str) -> String {
    format!("{bn}.gamma")
}
pub fn beta_name(bn: &str) -> String {
    format!("{bn}.beta")
}
pub fn mean_name(bn: &str) -> String {
    format!("{bn}.running_mean")
}
pub fn var_name(bn: &str) -> String {
    format!("{bn}.running_var")
}
pub fn act_step_name(conv: &str) -> String {
    format!("{conv}.act_step")
}
pub fn weight_step_name(conv: &str) -> String {
    format!("{conv}.weight_step")
}
pub fn adc_step_name(conv: &str) -> String {
    format!("{conv}.adc_step")
}

impl ModelGraph {
    pub fn sources(&self, idx: usize) -> Vec<Source> {
        let layer = &self.layers[idx];
        if layer.inputs.is_empty() {
            if idx == 0 {
                vec![Source::Input]
            } else {
                vec![Source::Layer(idx - 1)]
            }
        } else {
            layer.inputs.iter().map(|&i| Source::Layer(i)).collect()
        }
    }

    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        (idx + 1..self.layers.len())
            .filter(|&j| self.sources(j).contains(&Source::Layer(idx)))
            .collect()
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.conv().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_spec(&self, idx: usize) -> Result<&ConvSpec> {
        self.layers[idx].conv().ok_or_else(|| Error::NotConv {
            layer: self.layers[idx].name.clone(),
        })
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// The batchnorm that is the sole consumer of conv `idx`, if any.
    pub fn bn_after(&self, idx: usize) -> Option<usize> {
        let cons = self.consumers(idx);
        match cons[..] {
            [j] if matches!(self.layers[j].kind, LayerKind::BatchNorm { .. }) => Some(j),
            _ => None,
        }
    }

    /// The conv a batchnorm directly follows, if any.
    pub fn conv_before(&self, bn: usize) -> Option<usize> {
        match self.sources(bn)[..] {
            [Source::Layer(i)] if self.layers[i].conv().is_some() && self.bn_after(i) == Some(bn) => {
                Some(i)
            }
            _ => None,
        }
    }

    /// Check topology, channel consistency and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !seen.insert(&l.name) {
                return Err(Error::InvalidModel(format!("duplicate layer name `{}`", l.name)));
            }
            for &s in &l.inputs {
                if s >= i {
                    return Err(Error::InvalidModel(format!(
                        "layer `{}` reads from layer {s}, which does not precede it",
                        l.name
                    )));
                }
            }
            let n_in = self.sources(i).len();
            let expected = if matches!(l.kind, LayerKind::ResidualAdd) { 2 } else { 1 };
            if n_in != expected {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` needs {expected} input(s), has {n_in}",
                    l.name
                )));
            }
            if let LayerKind::Conv(c) = &l.kind {
                if c.in_channels == 0 || c.out_channels == 0 || c.kernel_size == 0 || c.stride == 0 {
                    return Err(Error::InvalidModel(format!("conv `{}` has a zero dimension", l.name)));
                }
            }
        }
        let last = self.layers.len() - 1;
        match self.layers[last].kind {
            LayerKind::Linear { out_features, .. } if out_features == self.num_classes => {}
            _ => {
                return Err(Error::InvalidModel(format!(
                    "last layer must be a linear classifier with {} outputs",
                    self.num_classes
                )))
            }
        }
        for i in 0..last {
            if self.consumers(i).is_empty() {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` output is unused (single output required)",
                    self.layers[i].name
                )));
            }
        }
        self.infer_shapes()?;
        self.check_params()
    }

    fn check_params(&self) -> Result<()> {
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = self.params.tensor(name)?;
            if t.shape() != shape {
                return Err(Error::InvalidModel(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv(c) => {
                    expect(
                        &l.weight_name(),
                        &[c.out_channels, c.in_channels, c.kernel_size, c.kernel_size],
                    )?;
                    if self.params.contains(&l.bias_name()) {
                        expect(&l.bias_name(), &[c.out_channels])?;
                    }
                    for name in [&l.quant.act, &l.quant.weight, &l.quant.psum].into_iter().flatten() {
                        if self.params.tensor(name)?.numel() != 1 {
                            return Err(Error::InvalidModel(format!("step `{name}` must be a scalar")));
                        }
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    for n in [gamma_name(&l.name), beta_name(&l.name), mean_name(&l.name), var_name(&l.name)] {
                        expect(&n, &[*channels])?;
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    expect(&l.weight_name(), &[*out_features, *in_features])?;
                    expect(&l.bias_name(), &[*out_features])?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output shape of every layer at the model's input resolution.
    pub fn infer_shapes(&self) -> Result<Vec<Shape3>> {
        self.infer_shapes_at(self.input_resolution)
    }

    pub fn infer_shapes_at(&self, resolution: usize) -> Result<Vec<Shape3>> {
        let input = (self.input_channels, resolution, resolution);
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let ins: Vec<Shape3> = self
                .sources(i)
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(j) => shapes[*j],
                })
                .collect();
            let (c, h, w) = ins[0];
            let bad = |msg: String| Error::InvalidModel(format!("layer `{}`: {msg}", l.name));
            let out = match &l.kind {
                LayerKind::Conv(cs) => {
                    if cs.in_channels != c {
                        return Err(bad(format!("expects {} input channels, gets {c}", cs.in_channels)));
                    }
                    let p = cs.pad();
                    if h + 2 * p < cs.kernel_size || w + 2 * p < cs.kernel_size {
                        return Err(bad(format!("kernel {} larger than input {h}x{w}", cs.kernel_size)));
                    }
                    (
                        cs.out_channels,
                        crate::autograd::kernels::output_size(h, cs.kernel_size, cs.stride, p),
                        crate::autograd::kernels::output_size(w, cs.kernel_size, cs.stride, p),
                    )
                }
                LayerKind::BatchNorm { channels } => {
                    if *channels != c {
                        return Err(bad(format!("has {channels} channels, input has {c}")));
                    }
                    (c, h, w)
                }
                LayerKind::Relu => (c, h, w),
                LayerKind::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(bad(format!("pool {kernel}/{stride} on {h}x{w}")));
                    }
                    (
                        c,
                        crate::autograd::kernels::output_size(h, *kernel, *stride, 0),
                        crate::autograd::kernels::output_size(w, *kernel, *stride, 0),
                    )
                }
                LayerKind::AvgPool => (c, 1, 1),
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if c * h * w != *in_features {
                        return Err(bad(format!("expects {in_features} features, gets {}", c * h * w)));
                    }
                    (*out_features, 1, 1)
                }
                LayerKind::ResidualAdd => {
                    if ins[0] != ins[1] {
                        return Err(bad(format!("residual add of mismatched shapes {:?} and {:?}", ins[0], ins[1])));
                    }
                    ins[0]
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Input shape of layer `idx`.
    pub fn input_shape(&self, idx: usize, shapes: &[Shape3]) -> Shape3 {
        match self.sources(idx)[0] {
            Source::Input => (self.input_channels, self.input_resolution, self.input_resolution),
            Source::Layer(j) => shapes[j],
        }
    }

    /// Weight count of conv and linear layers; batchnorm parameters fold into
    /// the convolutions and are not counted.
    pub fn param_count(&self) -> ParamCount {
        let mut pc = ParamCount { conv: 0, linear: 0 };
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv(c) => pc.conv += c.weight_count(),
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => pc.linear += in_features * out_features,
                _ => {}
            }
        }
        pc
    }

    /// Channel counts of every conv output, in layer order.
    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.conv().map(|c| c.out_channels))
            .collect()
    }

    pub fn spaces(&self) -> Result<ChannelSpaces> {
        ChannelSpaces::analyze(self)
    }

    /// Mark which parameters an optimizer may update.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut() {
            p.trainable = pred(&p.name);
        }
    }

    pub fn has_bn(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    }
}
