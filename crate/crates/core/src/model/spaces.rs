//! Channel spaces: sets of tensors that share one channel index.
//!
//! Batchnorm, ReLU, pooling and residual adds preserve channel identity, so
//! removing or adding a channel has to touch every conv producing the space,
//! every batchnorm normalizing it, and every layer reading it.

use super::{LayerKind, ModelGraph, Source};
use crate::error::{Error, Result};

pub type SpaceId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpace {
    pub channels: usize,
    /// The model input; its width is fixed.
    pub is_input: bool,
    pub producers: Vec<usize>,
    pub batchnorms: Vec<usize>,
    pub conv_consumers: Vec<usize>,
    pub linear_consumers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpaces {
    pub spaces: Vec<ChannelSpace>,
    /// Output space of each layer (`None` for linear layers).
    layer_space: Vec<Option<SpaceId>>,
    input_space: SpaceId,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl ChannelSpaces {
    pub fn analyze(model: &ModelGraph) -> Result<Self> {
        let shapes = model.infer_shapes()?;
        // node 0 is the input, node i+1 the output of layer i
        let n = model.layers.len() + 1;
        let mut parent: Vec<usize> = (0..n).collect();
        let node = |s: Source| match s {
            Source::Input => 0,
            Source::Layer(j) => j + 1,
        };
        for (i, l) in model.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv(_) | LayerKind::Linear { .. } => {}
                _ => {
                    for s in model.sources(i) {
                        let (a, b) = (find(&mut parent, i + 1), find(&mut parent, node(s)));
                        parent[a] = b;
                    }
                }
            }
        }
        let mut root_to_space = std::collections::BTreeMap::new();
        let mut spaces: Vec<ChannelSpace> = Vec::new();
        let mut space_of = |parent: &mut [usize], x: usize, channels: usize, spaces: &mut Vec<ChannelSpace>| {
            let r = find(parent, x);
            *root_to_space.entry(r).or_insert_with(|| {
                spaces.push(ChannelSpace {
                    channels,
                    is_input: false,
                    producers: Vec::new(),
                    batchnorms: Vec::new(),
                    conv_consumers: Vec::new(),
                    linear_consumers: Vec::new(),
                });
                spaces.len() - 1
            })
        };
        let input_space = space_of(&mut parent, 0, model.input_channels, &mut spaces);
        spaces[input_space].is_input = true;
        let mut layer_space = vec![None; model.layers.len()];
        for (i, l) in model.layers.iter().enumerate() {
            if !matches!(l.kind, LayerKind::Linear { .. }) {
                layer_space[i] = Some(space_of(&mut parent, i + 1, shapes[i].0, &mut spaces));
            }
        }
        let mut out = Self {
            spaces,
            layer_space,
            input_space,
        };
        for (i, l) in model.layers.iter().enumerate() {
            let src = out.source_space(model, i);
            match l.kind {
                LayerKind::Conv(_) => {
                    let own = out.layer_space[i].expect("conv has a space");
                    out.spaces[own].producers.push(i);
                    if let Some(s) = src {
                        out.spaces[s].conv_consumers.push(i);
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let own = out.layer_space[i].expect("bn has a space");
                    out.spaces[own].batchnorms.push(i);
                }
                LayerKind::Linear { .. } => {
                    let s = src.ok_or_else(|| {
                        Error::InvalidModel(format!("linear `{}` must read a conv feature map", l.name))
                    })?;
                    out.spaces[s].linear_consumers.push(i);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Output space of layer `idx`.
    pub fn of_layer(&self, idx: usize) -> Option<SpaceId> {
        self.layer_space[idx]
    }

    /// Space layer `idx` reads from.
    pub fn source_space(&self, model: &ModelGraph, idx: usize) -> Option<SpaceId> {
        match model.sources(idx)[0] {
            Source::Input => Some(self.input_space),
            Source::Layer(j) => self.layer_space[j],
        }
    }

    pub fn input_space(&self) -> SpaceId {
        self.input_space
    }

    pub fn get(&self, id: SpaceId) -> &ChannelSpace {
        &self.spaces[id]
    }
}

#[cfg(test)]
mod tests {
    use super::super::{resnet, toy_cnn};
    use crate::rng;

    #[test]
    fn chain_spaces() {
        let m = toy_cnn(3, 8, 2, &mut rng(0)).unwrap();
        let sp = m.spaces().unwrap();
        // input + one space per conv
        assert_eq!(sp.spaces.len(), 5);
        let convs = m.conv_indices();
        for (k, &c) in convs.iter().enumerate() {
            let s = sp.get(sp.of_layer(c).unwrap());
            assert_eq!(s.producers, vec![c]);
            assert_eq!(s.batchnorms.len(), 1);
            if k + 1 < convs.len() {
                assert_eq!(s.conv_consumers, vec![convs[k + 1]]);
            } else {
                assert_eq!(s.linear_consumers.len(), 1);
            }
        }
        assert!(sp.get(sp.input_space()).is_input);
    }

    #[test]
    fn residual_spaces_merge() {
        let m = resnet("r", &[4, 8], &[2, 1], 3, 8, 2, &mut rng(0)).unwrap();
        let sp = m.spaces().unwrap();
        let stem = m.layer_index("stem").unwrap();
        let s = sp.get(sp.of_layer(stem).unwrap());
        // stem output joins both identity blocks of stage 1
        let names: Vec<&str> = s.producers.iter().map(|&i| m.layers[i].name.as_str()).collect();
        assert_eq!(names, vec!["stem", "s1b1_conv2", "s1b2_conv2"]);
        assert_eq!(s.batchnorms.len(), 3);
        let down = m.layer_index("s2b1_down").unwrap();
        let s2 = sp.get(sp.of_layer(down).unwrap());
        assert_eq!(s2.producers.len(), 2);
        assert_eq!(s2.linear_consumers.len(), 1);
    }
}
