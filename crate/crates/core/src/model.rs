//! The four-stage parallel-branch network and its grasp-map output.
//!
//! Layout (`C = branch_channels`, `B = blocks_per_stage`):
//!
//! ```text
//! stem            2 x (3x3 s2 conv, BN, ReLU): Cin -> C0 -> C0, H/4
//! stage1          B0 residual blocks on branch 0
//! transition1     3x3 s2 conv-BN-ReLU from branch 0: C0 -> C1
//! stage2..stage4  B(s-1) residual blocks per branch, then a fuse layer;
//!                 stages 2 and 3 are followed by a transition that spawns
//!                 the next branch from the lowest-resolution one
//! head            highest_only: branch 0 (C0 channels)
//!                 fused: branches 1..3 upsampled to branch-0 size and
//!                        concatenated with branch 0 (C0+C1+C2+C3 channels)
//!                 then x4 bilinear upsample and one 3x3 conv per map
//! ```
//!
//! The output tensor has four channels: quality (logistic), sin 2θ and
//! cos 2θ (tanh) and normalized width (linear).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, BlockSpec, Ctx, LayerSpec, ParamStore};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{BnConfig, Graph, Mode, NodeId, RunningStats, Scalar, Shape, Tensor};

pub const NUM_STAGES: usize = 4;

/// Which branch representations feed the output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadVariant {
    /// All branches, upsampled to branch-0 size and concatenated.
    Fused,
    /// Only the highest-resolution branch.
    HighestOnly,
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::Fused => "fused",
            HeadVariant::HighestOnly => "highest_only",
        })
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(HeadVariant::Fused),
            "highest_only" | "highest" => Ok(HeadVariant::HighestOnly),
            _ => Err(Error::config("head_variant", format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// 1 (depth), 3 (RGB) or 4 (RGB-D).
    pub input_channels: usize,
    pub branch_channels: [usize; NUM_STAGES],
    /// Residual blocks per branch in each stage.
    pub blocks_per_stage: [usize; NUM_STAGES],
    pub head: HeadVariant,
    /// `(height, width)`, both divisible by 32.
    pub input_size: (usize, usize),
    pub bn: BnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 4,
            branch_channels: [18, 36, 72, 144],
            blocks_per_stage: [1, 1, 2, 2],
            head: HeadVariant::Fused,
            input_size: (224, 224),
            bn: BnConfig::default(),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_four(field: &str, s: &str) -> Result<[usize; NUM_STAGES]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(field, format!("expected 4 comma-separated integers, got {s:?}")))?;
    v.try_into()
        .map_err(|_| Error::config(field, format!("expected 4 comma-separated integers, got {s:?}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 4].contains(&self.input_channels) {
            return Err(Error::config(
                "input_channels",
                format!("must be 1, 3 or 4, got {}", self.input_channels),
            ));
        }
        if self.branch_channels[0] == 0 || self.branch_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "branch_channels",
                format!("must be positive and strictly increasing, got {:?}", self.branch_channels),
            ));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(
                "input_size",
                format!("height and width must be positive multiples of 32, got {h}x{w}"),
            ));
        }
        if !(self.bn.momentum > 0.0 && self.bn.momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must lie in (0, 1]"));
        }
        if self.bn.eps <= 0.0 {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        Ok(())
    }

    /// Channels entering the output head.
    pub fn head_channels(&self) -> usize {
        match self.head {
            HeadVariant::Fused => self.branch_channels.iter().sum(),
            HeadVariant::HighestOnly => self.branch_channels[0],
        }
    }

    /// Every parameterized layer, in forward order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let c = self.branch_channels;
        let mut layers = BlockSpec::Stem {
            cin: self.input_channels,
            cout: c[0],
        }
        .layers("stem");
        for s in 1..=NUM_STAGES {
            for (r, &ch) in c.iter().enumerate().take(s) {
                for b in 0..self.blocks_per_stage[s - 1] {
                    layers.extend(BlockSpec::Residual { channels: ch }.layers(&block_name(s, r, b)));
                }
            }
            if s >= 2 {
                layers.extend(
                    BlockSpec::Fuse {
                        channels: c[..s].to_vec(),
                    }
                    .layers(&format!("stage{s}.fuse")),
                );
            }
            if s < NUM_STAGES {
                layers.extend(
                    BlockSpec::Transition {
                        cin: c[s - 1],
                        cout: c[s],
                    }
                    .layers(&format!("transition{s}")),
                );
            }
        }
        layers.push(LayerSpec::conv(HEAD_CONV, self.head_channels(), 4, 3));
        layers
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.input_channels".into(), self.input_channels.to_string());
        m.insert("model.branch_channels".into(), join(&self.branch_channels));
        m.insert("model.blocks_per_stage".into(), join(&self.blocks_per_stage));
        m.insert("model.head_variant".into(), self.head.to_string());
        m.insert(
            "model.input_size".into(),
            format!("{},{}", self.input_size.0, self.input_size.1),
        );
        m.insert("model.bn_momentum".into(), self.bn.momentum.to_string());
        m.insert("model.bn_eps".into(), self.bn.eps.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(&format!("model.{k}"))
                .ok_or_else(|| Error::config(k, "missing from checkpoint manifest"))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(k, "not a number"))
        };
        let size = get("input_size")?;
        let (h, w) = size
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::config("input_size", format!("bad value {size:?}")))?;
        let cfg = ModelConfig {
            input_channels: get("input_channels")?
                .parse()
                .map_err(|_| Error::config("input_channels", "not an integer"))?,
            branch_channels: parse_four("branch_channels", get("branch_channels")?)?,
            blocks_per_stage: parse_four("blocks_per_stage", get("blocks_per_stage")?)?,
            head: get("head_variant")?.parse()?,
            input_size: (h, w),
            bn: BnConfig {
                momentum: num("bn_momentum")?,
                eps: num("bn_eps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_stage_list(field: &str, s: &str) -> Result<[usize; NUM_STAGES]> {
    parse_four(field, s)
}

const HEAD_CONV: &str = "head.maps";

fn block_name(stage: usize, branch: usize, block: usize) -> String {
    format!("stage{stage}.branch{branch}.block{block}")
}

/// Output channel order of the network.
pub const MAP_QUALITY: usize = 0;
pub const MAP_SIN: usize = 1;
pub const MAP_COS: usize = 2;
pub const MAP_WIDTH: usize = 3;

/// Per-pixel grasp maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspMaps {
    pub height: usize,
    pub width: usize,
    /// Grasp quality in `[0, 1]`.
    pub quality: Vec<f32>,
    /// `sin 2θ` in `[-1, 1]`.
    pub sin2: Vec<f32>,
    /// `cos 2θ` in `[-1, 1]`.
    pub cos2: Vec<f32>,
    /// Jaw opening divided by the maximum width. Labels lie in `[0, 1]`;
    /// network output is unbounded and clamped by the decoder.
    pub width_norm: Vec<f32>,
}

impl GraspMaps {
    pub fn zeros(height: usize, width: usize) -> Self {
        let z = vec![0.0; height * width];
        GraspMaps {
            height,
            width,
            quality: z.clone(),
            sin2: z.clone(),
            cos2: z.clone(),
            width_norm: z,
        }
    }

    fn planes(&self) -> [&[f32]; 4] {
        [&self.quality, &self.sin2, &self.cos2, &self.width_norm]
    }

    /// Stack into an `(N, 4, H, W)` tensor.
    pub fn to_tensor(maps: &[GraspMaps]) -> Result<Tensor<f32>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Invalid("no grasp maps to stack".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(maps.len() * 4 * h * w);
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape(
                    "grasp maps",
                    format!("{}x{} vs {h}x{w}", m.height, m.width),
                ));
            }
            for p in m.planes() {
                data.extend_from_slice(p);
            }
        }
        Tensor::new(Shape::new(maps.len(), 4, h, w), data)
    }

    /// Split an `(N, 4, H, W)` tensor into per-image maps.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Vec<GraspMaps>> {
        let s = t.shape();
        if s.c() != 4 {
            return Err(Error::shape("grasp maps", format!("expected 4 channels, got {s}")));
        }
        Ok((0..s.n())
            .map(|n| GraspMaps {
                height: s.h(),
                width: s.w(),
                quality: t.plane(n, MAP_QUALITY).to_vec(),
                sin2: t.plane(n, MAP_SIN).to_vec(),
                cos2: t.plane(n, MAP_COS).to_vec(),
                width_norm: t.plane(n, MAP_WIDTH).to_vec(),
            })
            .collect())
    }
}

/// Build the output head on top of the stage-4 branches.
pub fn head<T: Scalar>(ctx: &mut Ctx<'_, T>, variant: HeadVariant, branches: &[NodeId]) -> Result<NodeId> {
    let feats = match variant {
        HeadVariant::HighestOnly => branches[0],
        HeadVariant::Fused => {
            let mut parts = vec![branches[0]];
            for (r, b) in branches.iter().enumerate().skip(1) {
                parts.push(ctx.graph.upsample(*b, 1 << r)?);
            }
            ctx.graph.concat(&parts)?
        }
    };
    let up = ctx.graph.upsample(feats, 4)?;
    let raw = ctx.conv(HEAD_CONV, up, 1)?;
    let mut maps = Vec::with_capacity(4);
    for ch in 0..4 {
        let m = ctx.graph.channel_slice(raw, ch, 1)?;
        maps.push(match ch {
            MAP_QUALITY => ctx.graph.sigmoid(m),
            MAP_SIN | MAP_COS => ctx.graph.tanh(m),
            // linear, clamped when decoded
            _ => m,
        });
    }
    ctx.graph.concat(&maps)
}

/// Run the full network on `x`, returning the `(N, 4, H, W)` map node.
pub fn forward_graph<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParamStore<T>,
    graph: &mut Graph<T>,
    x: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let s = graph.shape(x);
    if s.c() != config.input_channels {
        return Err(Error::shape(
            "forward",
            format!("input {s} has {} channels, model expects {}", s.c(), config.input_channels),
        ));
    }
    if (s.h(), s.w()) != config.input_size {
        return Err(Error::shape(
            "forward",
            format!(
                "input {s} is {}x{}, model expects {}x{}",
                s.h(),
                s.w(),
                config.input_size.0,
                config.input_size.1
            ),
        ));
    }
    let mut ctx = Ctx::new(graph, params, mode, config.bn);
    let mut branches = vec![nn::stem(&mut ctx, "stem", x)?];
    for st in 1..=NUM_STAGES {
        for (r, b) in branches.iter_mut().enumerate() {
            for k in 0..config.blocks_per_stage[st - 1] {
                *b = nn::residual_block(&mut ctx, &block_name(st, r, k), *b)?;
            }
        }
        if st >= 2 {
            branches = nn::fuse_layer(&mut ctx, &format!("stage{st}.fuse"), &branches)?;
        }
        if st < NUM_STAGES {
            let last = *branches.last().expect("at least one branch");
            branches.push(nn::transition(&mut ctx, &format!("transition{st}"), last)?);
        }
    }
    head(&mut ctx, config.head, &branches)
}

/// Initial quality-head bias: the logit of 0.01.
pub const QUALITY_PRIOR_LOGIT: f32 = -4.595_12;
/// Standard deviation of the initial output-head weights.
pub const HEAD_WEIGHT_STD: f32 = 0.001;

/// Seeded parameters for `config`. Hidden layers use [`nn::init_layers`];
/// the output head starts near "no grasp" (small weights, quality bias at
/// [`QUALITY_PRIOR_LOGIT`]) so the sparse positive pixels are not swamped by
/// the first updates.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let mut params = nn::init_layers(&config.layer_specs(), seed);
    let w = params.tensor_mut(&format!("{HEAD_CONV}.weight")).expect("head weight");
    let fan_in = (w.shape().c() * w.shape().h() * w.shape().w()) as f32;
    let scale = HEAD_WEIGHT_STD / (2.0 / fan_in).sqrt();
    w.data_mut().iter_mut().for_each(|v| *v *= scale);
    let b = params.tensor_mut(&format!("{HEAD_CONV}.bias")).expect("head bias");
    b.data_mut()[MAP_QUALITY] = QUALITY_PRIOR_LOGIT;
    params
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore<f32>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params })
    }

    /// Wrap existing parameters, checking names and shapes against the
    /// layer list.
    pub fn from_parts(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let reference = nn::init_layers(&config.layer_specs(), 0);
        for (name, t) in reference.tensors() {
            let got = params.tensor(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    "model parameters",
                    format!("{name}: expected {}, got {}", t.shape(), got.shape()),
                ));
            }
        }
        for (name, s) in reference.all_stats() {
            if params.stats(name)?.channels() != s.channels() {
                return Err(Error::shape("model parameters", format!("{name}: running stats width")));
            }
        }
        if params.num_params() != reference.num_params() {
            return Err(Error::Invalid("unexpected extra parameters".into()));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Forward pass returning the raw `(N, 4, H, W)` output.
    pub fn forward_tensor(&mut self, images: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = forward_graph(&self.config, &mut self.params, &mut g, x, mode)?;
        Ok(g.take_value(out))
    }

    pub fn forward(&mut self, images: &Tensor<f32>, mode: Mode) -> Result<Vec<GraspMaps>> {
        GraspMaps::from_tensor(&self.forward_tensor(images, mode)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: self.config.to_meta(),
            records: Vec::new(),
        };
        write_store(&self.params, &mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let reference = nn::init_layers(&config.layer_specs(), 0);
        let params = read_store(&reference, ck, "")?;
        Model::from_parts(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Append a parameter store to a checkpoint. Running statistics become
/// `<name>.running_mean` / `<name>.running_var` records.
pub fn write_store(params: &ParamStore<f32>, ck: &mut Checkpoint, prefix: &str) {
    for (name, t) in params.tensors() {
        ck.push(format!("{prefix}{name}"), t.clone());
    }
    for (name, s) in params.all_stats() {
        let shape = Shape::new(1, s.channels(), 1, 1);
        ck.push(
            format!("{prefix}{name}.running_mean"),
            Tensor::new(shape, s.mean.clone()).expect("sized"),
        );
        ck.push(
            format!("{prefix}{name}.running_var"),
            Tensor::new(shape, s.var.clone()).expect("sized"),
        );
    }
}

/// Read a store with the same names as `like` from a checkpoint.
pub fn read_store(like: &ParamStore<f32>, ck: &Checkpoint, prefix: &str) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    let find = |name: &str| {
        ck.get(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::Invalid(format!("checkpoint is missing `{prefix}{name}`")))
    };
    for (name, t) in like.tensors() {
        let got = find(name)?;
        if got.shape() != t.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: expected {}, got {}", t.shape(), got.shape()),
            ));
        }
        out.insert(name.clone(), got.clone());
    }
    for (name, s) in like.all_stats() {
        let mean = find(&format!("{name}.running_mean"))?.data().to_vec();
        let var = find(&format!("{name}.running_var"))?.data().to_vec();
        if mean.len() != s.channels() || var.len() != s.channels() {
            return Err(Error::shape("checkpoint", format!("{name}: running stats width")));
        }
        out.insert_stats(
            name.clone(),
            RunningStats {
                mean,
                var,
                initialized: true,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(head: HeadVariant) -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            branch_channels: [2, 3, 4, 5],
            blocks_per_stage: [1, 1, 1, 1],
            head,
            input_size: (32, 32),
            bn: BnConfig::default(),
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = ModelConfig::default();
        c.input_channels = 2;
        assert!(Model::build(c, 0).unwrap_err().to_string().contains("input_channels"));
        let mut c = ModelConfig::default();
        c.branch_channels = [18, 18, 72, 144];
        assert!(Model::build(c, 0).unwrap_err().to_string().contains("branch_channels"));
        let mut c = ModelConfig::default();
        c.input_size = (224, 200);
        assert!(Model::build(c, 0).unwrap_err().to_string().contains("input_size"));
    }

    #[test]
    fn meta_round_trip() {
        let c = small(HeadVariant::HighestOnly);
        assert_eq!(ModelConfig::from_meta(&c.to_meta()).unwrap(), c);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let m = Model::build(small(HeadVariant::Fused), 3).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn output_channels_are_squashed_per_map() {
        let mut m = Model::build(small(HeadVariant::Fused), 1).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, 32, 32), |[n, _, y, x]| {
            ((n * 31 + y * 7 + x * 13) % 17) as f32 - 8.0
        });
        let maps = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(maps.len(), 2);
        for mp in &maps {
            assert_eq!((mp.height, mp.width), (32, 32));
            assert!(mp.quality.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(mp.sin2.iter().chain(&mp.cos2).all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn wrong_input_rejected() {
        let mut m = Model::build(small(HeadVariant::Fused), 1).unwrap();
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 3, 32, 32)), Mode::Eval).is_err());
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 1, 64, 64)), Mode::Eval).is_err());
    }
}
