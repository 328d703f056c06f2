//! Parameter storage and the composite blocks of the network: stem,
//! residual block, cross-resolution fuse layer and branch transition.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnConfig, Graph, Mode, NodeId, RunningStats, Scalar, Shape, Tensor};

/// Named trainable tensors plus batch-norm running statistics.
///
/// Naming: a convolution `p` owns `p.weight` `(Cout, Cin, k, k)` and
/// `p.bias` `(1, Cout, 1, 1)`; a batch norm `p` owns `p.gamma`, `p.beta`
/// `(1, C, 1, 1)` and running stats under `p`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, s: RunningStats<T>) {
        self.stats.insert(name.into(), s);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn stats(&self, name: &str) -> Result<&RunningStats<T>> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing running statistics `{name}`")))
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing running statistics `{name}`")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.stats.iter()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
        self.stats.extend(other.stats);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stats: self.stats.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Biases and batch-norm affine parameters are not weight-decayed.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// One parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
        }
    }

    pub fn bn(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec::BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            LayerSpec::Conv {
                cin, cout, kernel, ..
            } => cout * cin * kernel * kernel + cout,
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
        }
    }
}

/// The blocks the network is assembled from, each with its layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// Two 3x3 stride-2 conv-BN-ReLU units: `cin -> cout -> cout`.
    Stem { cin: usize, cout: usize },
    /// conv3x3-BN-ReLU-conv3x3-BN on the residual path.
    Residual { channels: usize },
    /// All-to-all exchange between branches with the given widths.
    Fuse { channels: Vec<usize> },
    /// Stride-2 conv-BN-ReLU spawning a new lower-resolution branch.
    Transition { cin: usize, cout: usize },
}

impl BlockSpec {
    pub fn layers(&self, prefix: &str) -> Vec<LayerSpec> {
        match self {
            BlockSpec::Stem { cin, cout } => vec![
                LayerSpec::conv(format!("{prefix}.conv1"), *cin, *cout, 3),
                LayerSpec::bn(format!("{prefix}.bn1"), *cout),
                LayerSpec::conv(format!("{prefix}.conv2"), *cout, *cout, 3),
                LayerSpec::bn(format!("{prefix}.bn2"), *cout),
            ],
            BlockSpec::Residual { channels: c } => vec![
                LayerSpec::conv(format!("{prefix}.conv1"), *c, *c, 3),
                LayerSpec::bn(format!("{prefix}.bn1"), *c),
                LayerSpec::conv(format!("{prefix}.conv2"), *c, *c, 3),
                LayerSpec::bn(format!("{prefix}.bn2"), *c),
            ],
            BlockSpec::Fuse { channels } => {
                let mut out = Vec::new();
                for i in 0..channels.len() {
                    for j in 0..channels.len() {
                        if j < i {
                            for k in 0..(i - j) {
                                let cout = if k + 1 == i - j { channels[i] } else { channels[j] };
                                let p = fuse_down_name(prefix, j, i, k);
                                out.push(LayerSpec::conv(format!("{p}.conv"), channels[j], cout, 3));
                                out.push(LayerSpec::bn(format!("{p}.bn"), cout));
                            }
                        } else if j > i {
                            let p = fuse_up_name(prefix, j, i);
                            out.push(LayerSpec::conv(format!("{p}.conv"), channels[j], channels[i], 1));
                            out.push(LayerSpec::bn(format!("{p}.bn"), channels[i]));
                        }
                    }
                }
                out
            }
            BlockSpec::Transition { cin, cout } => vec![
                LayerSpec::conv(format!("{prefix}.conv"), *cin, *cout, 3),
                LayerSpec::bn(format!("{prefix}.bn"), *cout),
            ],
        }
    }
}

fn fuse_down_name(prefix: &str, from: usize, to: usize, step: usize) -> String {
    format!("{prefix}.b{from}_to_b{to}.down{step}")
}

fn fuse_up_name(prefix: &str, from: usize, to: usize) -> String {
    format!("{prefix}.b{from}_to_b{to}.up")
}

/// Deterministic per-layer seed so that adding a layer does not perturb
/// the initialization of the others.
fn layer_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// He-normal convolution weights (std `sqrt(2 / fan_in)`), zero biases,
/// unit gamma, zero beta, running mean 0 and variance 1.
pub fn init_layers(layers: &[LayerSpec], seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for layer in layers {
        match layer {
            LayerSpec::Conv {
                name,
                cin,
                cout,
                kernel,
            } => {
                let fan_in = (cin * kernel * kernel) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, name));
                let shape = Shape::new(*cout, *cin, *kernel, *kernel);
                let data = (0..shape.numel())
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                store.insert(format!("{name}.weight"), Tensor::new(shape, data).expect("sized"));
                store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(1, *cout, 1, 1)));
            }
            LayerSpec::BatchNorm { name, channels } => {
                let s = Shape::new(1, *channels, 1, 1);
                store.insert(format!("{name}.gamma"), Tensor::full(s, 1.0));
                store.insert(format!("{name}.beta"), Tensor::zeros(s));
                store.insert_stats(name.clone(), RunningStats::new(*channels));
            }
        }
    }
    store
}

pub fn init_params(block: &BlockSpec, prefix: &str, seed: u64) -> ParamStore<f32> {
    init_layers(&block.layers(prefix), seed)
}

/// Forward-pass context: the tape, the parameters and the batch-norm mode.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a mut ParamStore<T>,
    pub mode: Mode,
    pub bn: BnConfig,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParamStore<T>, mode: Mode, bn: BnConfig) -> Self {
        Ctx {
            graph,
            params,
            mode,
            bn,
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        let t = self.params.tensor(name)?.clone();
        Ok(self.graph.param(name, t))
    }

    /// Convolution layer `name` with padding `kernel / 2`.
    pub fn conv(&mut self, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let pad = self.graph.shape(w).h() / 2;
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        let stats = self.params.stats_mut(name)?;
        self.graph.batchnorm2d(x, g, b, stats, self.bn, self.mode)
    }

    pub fn conv_bn(&mut self, conv: &str, bn: &str, x: NodeId, stride: usize, relu: bool) -> Result<NodeId> {
        let y = self.conv(conv, x, stride)?;
        let y = self.bn(bn, y)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }
}

/// Two stride-2 conv-BN-ReLU units; output at a quarter of the input size.
pub fn stem<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let s = ctx.graph.shape(x);
    if !s.h().is_multiple_of(4) || !s.w().is_multiple_of(4) {
        return Err(Error::shape(
            "stem",
            format!("input {s}: height and width must be divisible by 4"),
        ));
    }
    let y = ctx.conv_bn(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x, 2, true)?;
    ctx.conv_bn(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), y, 2, true)
}

/// `relu(x + bn(conv(relu(bn(conv(x))))))`.
pub fn residual_block<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = ctx.conv_bn(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x, 1, true)?;
    let y = ctx.conv_bn(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), y, 1, false)?;
    let s = ctx.graph.add(x, y)?;
    Ok(ctx.graph.relu(s))
}

/// Stride-2 conv-BN-ReLU from the lowest-resolution branch.
pub fn transition<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: NodeId) -> Result<NodeId> {
    ctx.conv_bn(&format!("{prefix}.conv"), &format!("{prefix}.bn"), x, 2, true)
}

/// Output branch `i` is `relu(sum_j T(j -> i)(branch j))` where `T(i -> i)`
/// is the identity, higher-resolution inputs are reduced by a chain of
/// stride-2 3x3 conv-BN units and lower-resolution inputs are bilinearly
/// upsampled and passed through a 1x1 conv-BN.
pub fn fuse_layer<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, branches: &[NodeId]) -> Result<Vec<NodeId>> {
    if branches.len() < 2 {
        return Err(Error::Invalid(format!(
            "fuse layer needs at least 2 branches, got {}",
            branches.len()
        )));
    }
    let base = ctx.graph.shape(branches[0]);
    for (r, b) in branches.iter().enumerate() {
        let s = ctx.graph.shape(*b);
        if s.n() != base.n() || s.h() << r != base.h() || s.w() << r != base.w() {
            return Err(Error::shape(
                "fuse layer",
                format!("branch {r} has shape {s}, branch 0 has {base}"),
            ));
        }
    }
    let mut out = Vec::with_capacity(branches.len());
    for i in 0..branches.len() {
        let mut acc = branches[i];
        for (j, &bj) in branches.iter().enumerate() {
            let t = if j < i {
                let mut y = bj;
                for k in 0..(i - j) {
                    let p = fuse_down_name(prefix, j, i, k);
                    y = ctx.conv_bn(&format!("{p}.conv"), &format!("{p}.bn"), y, 2, false)?;
                }
                y
            } else if j > i {
                let p = fuse_up_name(prefix, j, i);
                let y = ctx.graph.upsample(bj, 1 << (j - i))?;
                ctx.conv_bn(&format!("{p}.conv"), &format!("{p}.bn"), y, 1, false)?
            } else {
                continue;
            };
            acc = ctx.graph.add(acc, t)?;
        }
        out.push(ctx.graph.relu(acc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let spec = BlockSpec::Fuse {
            channels: vec![4, 8, 16],
        };
        assert_eq!(init_params(&spec, "f", 7), init_params(&spec, "f", 7));
        assert_ne!(init_params(&spec, "f", 7), init_params(&spec, "f", 8));
    }

    #[test]
    fn bn_init_constants() {
        let p = init_params(&BlockSpec::Residual { channels: 5 }, "r", 0);
        for name in ["r.bn1", "r.bn2"] {
            assert!(p.tensor(&format!("{name}.gamma")).unwrap().data().iter().all(|v| *v == 1.0));
            assert!(p.tensor(&format!("{name}.beta")).unwrap().data().iter().all(|v| *v == 0.0));
            let s = p.stats(name).unwrap();
            assert!(s.mean.iter().all(|v| *v == 0.0) && s.var.iter().all(|v| *v == 1.0));
        }
        assert!(p.tensor("r.conv1.bias").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn he_std_matches_fan_in() {
        // 18 -> 72 channels of 3x3 gives 11664 draws
        let p = init_layers(&[LayerSpec::conv("c", 18, 72, 3)], 3);
        let w = p.tensor("c.weight").unwrap();
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.sum_f64() / n;
        let std = (w.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0f64 / (9.0 * 18.0)).sqrt();
        assert!((std - want).abs() < 0.2 * want, "std {std} want {want}");
        assert!(mean.abs() < 0.05 * want * 10.0);
    }

    #[test]
    fn fuse_layer_lists_every_cross_path() {
        let layers = BlockSpec::Fuse {
            channels: vec![2, 4, 8],
        }
        .layers("f");
        let convs: Vec<_> = layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect();
        // down: 0->1 (1), 0->2 (2), 1->2 (1); up: 1->0, 2->0, 2->1
        assert_eq!(convs.len(), 7);
        assert!(convs.contains(&"f.b0_to_b2.down1.conv"));
        assert!(convs.contains(&"f.b2_to_b0.up.conv"));
    }

    #[test]
    fn decay_exemptions() {
        assert!(decay_exempt("a.bias") && decay_exempt("a.bn.gamma") && decay_exempt("x.beta"));
        assert!(!decay_exempt("a.conv.weight"));
    }
}
