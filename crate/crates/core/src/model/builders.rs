//! Built-in architectures and parameter initialization.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    beta_name, gamma_name, mean_name, var_name, ConvSpec, Layer, LayerKind, ModelGraph,
};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// One entry of a VGG configuration: a 3×3 conv of the given width or a 2×2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VggItem {
    Conv(usize),
    Pool(PoolTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolTag {
    M,
}

#[allow(non_upper_case_globals)]
const M: VggItem = VggItem::Pool(PoolTag::M);
use VggItem::Conv as C;

/// Eight-conv VGG with 9.218M conv weights and 38592 bitline columns at 3×3 kernels.
pub const VGG9_CONFIG: &[VggItem] = &[
    C(64),
    M,
    C(128),
    M,
    C(256),
    C(256),
    M,
    C(512),
    C(512),
    M,
    C(512),
    C(512),
    M,
];

pub const VGG16_CONFIG: &[VggItem] = &[
    C(64),
    C(64),
    M,
    C(128),
    C(128),
    M,
    C(256),
    C(256),
    C(256),
    M,
    C(512),
    C(512),
    C(512),
    M,
    C(512),
    C(512),
    C(512),
    M,
];

/// Architecture description accepted by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ArchSpec {
    ToyCnn,
    Vgg9 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<Vec<VggItem>>,
    },
    Vgg16 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<Vec<VggItem>>,
    },
    Resnet18,
    Resnet {
        widths: Vec<usize>,
        blocks: Vec<usize>,
    },
    /// Explicit ordered layer list.
    Layers { layers: Vec<Layer> },
}

impl ArchSpec {
    pub fn build(
        &self,
        input_channels: usize,
        resolution: usize,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<ModelGraph> {
        match self {
            ArchSpec::ToyCnn => toy_cnn(input_channels, resolution, num_classes, rng),
            ArchSpec::Vgg9 { config } => vgg(
                "vgg9",
                config.as_deref().unwrap_or(VGG9_CONFIG),
                input_channels,
                resolution,
                num_classes,
                rng,
            ),
            ArchSpec::Vgg16 { config } => vgg(
                "vgg16",
                config.as_deref().unwrap_or(VGG16_CONFIG),
                input_channels,
                resolution,
                num_classes,
                rng,
            ),
            ArchSpec::Resnet18 => resnet18(input_channels, resolution, num_classes, rng),
            ArchSpec::Resnet { widths, blocks } => resnet(
                "resnet",
                widths,
                blocks,
                input_channels,
                resolution,
                num_classes,
                rng,
            ),
            ArchSpec::Layers { layers } => {
                from_layers("custom", layers.clone(), input_channels, resolution, num_classes, rng)
            }
        }
    }
}

/// Samples from N(0, gain/fan_in).
pub fn kaiming_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches data")
}

/// Fresh parameters for every layer: He-normal conv weights, identity
/// batchnorms, and a small-variance linear classifier with zero bias.
fn init_params(layers: &[Layer], rng: &mut Rng) -> ParamStore {
    let mut ps = ParamStore::new();
    for l in layers {
        match &l.kind {
            LayerKind::Conv(c) => {
                let fan_in = c.in_channels * c.kernel_size * c.kernel_size;
                ps.insert(
                    l.weight_name(),
                    kaiming_normal(
                        &[c.out_channels, c.in_channels, c.kernel_size, c.kernel_size],
                        fan_in,
                        2.0,
                        rng,
                    ),
                    true,
                );
            }
            LayerKind::BatchNorm { channels } => insert_bn(&mut ps, &l.name, *channels),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                ps.insert(
                    l.weight_name(),
                    kaiming_normal(&[*out_features, *in_features], *in_features, 1.0, rng),
                    true,
                );
                ps.insert(l.bias_name(), Tensor::zeros(&[*out_features]), true);
            }
            _ => {}
        }
    }
    ps
}

pub(crate) fn insert_bn(ps: &mut ParamStore, name: &str, channels: usize) {
    ps.insert(gamma_name(name), Tensor::full(&[channels], 1.0), true);
    ps.insert(beta_name(name), Tensor::zeros(&[channels]), true);
    ps.insert(mean_name(name), Tensor::zeros(&[channels]), false);
    ps.insert(var_name(name), Tensor::full(&[channels], 1.0), false);
}

/// Build and validate a model from an explicit layer list.
pub fn from_layers(
    name: &str,
    layers: Vec<Layer>,
    input_channels: usize,
    resolution: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    let params = init_params(&layers, rng);
    let m = ModelGraph {
        name: name.to_string(),
        input_channels,
        input_resolution: resolution,
        num_classes,
        layers,
        params,
    };
    m.validate()?;
    Ok(m)
}

struct Seq {
    layers: Vec<Layer>,
}

impl Seq {
    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>) -> usize {
        let mut l = Layer::new(name, kind);
        l.inputs = inputs;
        self.layers.push(l);
        self.layers.len() - 1
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    fn conv_bn(&mut self, name: &str, spec: ConvSpec, input: Option<usize>, relu: bool) -> usize {
        let out = spec.out_channels;
        self.push(name.to_string(), LayerKind::Conv(spec), input.into_iter().collect());
        self.push(format!("{name}_bn"), LayerKind::BatchNorm { channels: out }, vec![]);
        if relu {
            self.push(format!("{name}_relu"), LayerKind::Relu, vec![]);
        }
        self.last()
    }
}

/// Plain VGG stack: each conv is followed by batchnorm and ReLU, pools halve
/// the resolution, and a single linear classifier reads the flattened features.
pub fn vgg(
    name: &str,
    config: &[VggItem],
    input_channels: usize,
    resolution: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    if !config.iter().any(|i| matches!(i, VggItem::Conv(_))) {
        return Err(Error::InvalidModel("vgg config has no conv layers".into()));
    }
    let mut s = Seq { layers: Vec::new() };
    let (mut c, mut hw) = (input_channels, resolution);
    let (mut nconv, mut npool) = (0, 0);
    for item in config {
        match *item {
            VggItem::Conv(w) => {
                nconv += 1;
                s.conv_bn(&format!("conv{nconv}"), ConvSpec::new(c, w, 3), None, true);
                c = w;
            }
            VggItem::Pool(_) => {
                npool += 1;
                if hw < 2 {
                    return Err(Error::InvalidModel(format!(
                        "vgg config pools below 1x1 at input resolution {resolution}"
                    )));
                }
                s.push(format!("pool{npool}"), LayerKind::MaxPool { kernel: 2, stride: 2 }, vec![]);
                hw /= 2;
            }
        }
    }
    s.push(
        "fc".into(),
        LayerKind::Linear {
            in_features: c * hw * hw,
            out_features: num_classes,
        },
        vec![],
    );
    from_layers(name, s.layers, input_channels, resolution, num_classes, rng)
}

pub fn vgg9(input_channels: usize, resolution: usize, num_classes: usize, rng: &mut Rng) -> Result<ModelGraph> {
    vgg("vgg9", VGG9_CONFIG, input_channels, resolution, num_classes, rng)
}

pub fn vgg16(input_channels: usize, resolution: usize, num_classes: usize, rng: &mut Rng) -> Result<ModelGraph> {
    vgg("vgg16", VGG16_CONFIG, input_channels, resolution, num_classes, rng)
}

/// Four 3×3 convs (16, 32, 64, 64 channels) with max-pools after the first
/// two, followed by a linear classifier.
pub fn toy_cnn(input_channels: usize, resolution: usize, num_classes: usize, rng: &mut Rng) -> Result<ModelGraph> {
    let mut m = vgg(
        "toy-cnn",
        &[C(16), M, C(32), M, C(64), C(64)],
        input_channels,
        resolution,
        num_classes,
        rng,
    )?;
    m.name = "toy-cnn".into();
    Ok(m)
}

/// CIFAR-style ResNet with basic blocks. Stage `i` has `blocks[i]` blocks of
/// width `widths[i]`; stages after the first downsample by stride 2 and use a
/// 1×1 projection shortcut whenever the shape changes.
pub fn resnet(
    name: &str,
    widths: &[usize],
    blocks: &[usize],
    input_channels: usize,
    resolution: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<ModelGraph> {
    if widths.is_empty() || widths.len() != blocks.len() {
        return Err(Error::InvalidModel(format!(
            "resnet needs one block count per stage width ({} widths, {} block counts)",
            widths.len(),
            blocks.len()
        )));
    }
    let mut s = Seq { layers: Vec::new() };
    let mut cur = s.conv_bn("stem", ConvSpec::new(input_channels, widths[0], 3), None, true);
    let mut c = widths[0];
    for (si, (&w, &nb)) in widths.iter().zip(blocks).enumerate() {
        for b in 0..nb {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", si + 1, b + 1);
            s.conv_bn(&format!("{p}_conv1"), ConvSpec::new(c, w, 3).with_stride(stride), Some(cur), true);
            let main = s.conv_bn(&format!("{p}_conv2"), ConvSpec::new(w, w, 3), None, false);
            let short = if stride != 1 || c != w {
                s.conv_bn(
                    &format!("{p}_down"),
                    ConvSpec::new(c, w, 1).with_stride(stride),
                    Some(cur),
                    false,
                )
            } else {
                cur
            };
            s.push(format!("{p}_add"), LayerKind::ResidualAdd, vec![main, short]);
            cur = s.push(format!("{p}_relu"), LayerKind::Relu, vec![]);
            c = w;
        }
    }
    s.push("pool".into(), LayerKind::AvgPool, vec![]);
    s.push(
        "fc".into(),
        LayerKind::Linear {
            in_features: c,
            out_features: num_classes,
        },
        vec![],
    );
    from_layers(name, s.layers, input_channels, resolution, num_classes, rng)
}

pub fn resnet18(input_channels: usize, resolution: usize, num_classes: usize, rng: &mut Rng) -> Result<ModelGraph> {
    resnet(
        "resnet18",
        &[64, 128, 256, 512],
        &[2, 2, 2, 2],
        input_channels,
        resolution,
        num_classes,
        rng,
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn single_conv(cin: usize, cout: usize, k: usize, res: usize) -> ModelGraph {
        let mut l = vec![
            Layer::new("c", LayerKind::Conv(ConvSpec::new(cin, cout, k))),
            Layer::new("c_bn", LayerKind::BatchNorm { channels: cout }),
            Layer::new("c_relu", LayerKind::Relu),
        ];
        l.push(Layer::new(
            "fc",
            LayerKind::Linear {
                in_features: cout * res * res,
                out_features: 2,
            },
        ));
        from_layers("single", l, cin, res, 2, &mut rng(0)).unwrap()
    }

    #[test]
    fn vgg9_counts() {
        let m = vgg9(3, 32, 10, &mut rng(0)).unwrap();
        assert_eq!(m.conv_indices().len(), 8);
        assert_eq!(m.param_count().conv, 9_217_728);
        assert_eq!(m.param_count().linear, 512 * 10);
    }

    #[test]
    fn vgg16_counts() {
        let m = vgg16(3, 32, 10, &mut rng(0)).unwrap();
        assert_eq!(m.conv_indices().len(), 13);
        assert_eq!(m.param_count().conv, 14_710_464);
    }

    #[test]
    fn resnet18_structure() {
        let m = resnet18(3, 32, 10, &mut rng(0)).unwrap();
        // 1 stem + 16 block convs + 3 projection shortcuts
        assert_eq!(m.conv_indices().len(), 20);
        let main: usize = m
            .layers
            .iter()
            .filter_map(|l| l.conv())
            .filter(|c| c.kernel_size == 3)
            .map(|c| c.weight_count())
            .sum();
        assert_eq!(main, 10_987_200);
        assert_eq!(m.infer_shapes().unwrap().last().unwrap().0, 10);
    }

    #[test]
    fn toy_cnn_shapes() {
        let m = toy_cnn(3, 16, 4, &mut rng(0)).unwrap();
        assert_eq!(m.conv_widths(), vec![16, 32, 64, 64]);
        let shapes = m.infer_shapes().unwrap();
        let conv_out: Vec<_> = m.conv_indices().iter().map(|&i| shapes[i]).collect();
        assert_eq!(conv_out, vec![(16, 16, 16), (32, 8, 8), (64, 4, 4), (64, 4, 4)]);
    }

    #[test]
    fn vgg_config_json() {
        let items: Vec<VggItem> = serde_json::from_str(r#"[8, "M", 16]"#).unwrap();
        assert_eq!(items, vec![C(8), M, C(16)]);
        let arch: ArchSpec = serde_json::from_str(r#"{"arch":"vgg9","config":[8,"M",16]}"#).unwrap();
        let m = arch.build(3, 8, 2, &mut rng(0)).unwrap();
        assert_eq!(m.conv_widths(), vec![8, 16]);
    }

    #[test]
    fn explicit_layers_arch() {
        let json = r#"{"arch":"layers","layers":[
            {"name":"a","kind":"conv","in_channels":3,"out_channels":4,"kernel_size":3},
            {"name":"a_bn","kind":"batchnorm","channels":4},
            {"name":"r","kind":"relu"},
            {"name":"p","kind":"avgpool"},
            {"name":"fc","kind":"linear","in_features":4,"out_features":2}]}"#;
        let arch: ArchSpec = serde_json::from_str(json).unwrap();
        let m = arch.build(3, 6, 2, &mut rng(0)).unwrap();
        assert_eq!(m.param_count().conv, 108);
        let bad = json.replace(r#""in_features":4"#, r#""in_features":5"#);
        let arch: ArchSpec = serde_json::from_str(&bad).unwrap();
        assert!(arch.build(3, 6, 2, &mut rng(0)).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = toy_cnn(3, 8, 2, &mut rng(5)).unwrap();
        let b = toy_cnn(3, 8, 2, &mut rng(5)).unwrap();
        assert_eq!(a.params, b.params);
    }
}
