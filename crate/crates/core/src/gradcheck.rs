//! Central finite-difference checks of the analytic gradients.
//!
//! Every case builds a scalar loss from named leaves in double precision.
//! Each leaf is perturbed at a few seeded coordinates by `±step` and the
//! numeric slope is compared with the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_graph, init_params, HeadVariant, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::{BnConfig, Graph, Mode, NodeId, RunningStats, Shape, Tensor};
use crate::train::grasp_loss;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per leaf tensor.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            probes: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds a scalar loss from the leaves in `params`.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<NodeId> + 'a;

fn loss_value(params: &ParamStore<f64>, build: &LossFn) -> Result<f64> {
    let mut p = params.clone();
    let mut g = Graph::new();
    let l = build(&mut g, &mut p)?;
    Ok(g.value(l).data()[0])
}

/// Check every tensor in `params` against finite differences.
pub fn check(name: &str, params: &ParamStore<f64>, build: &LossFn, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut work = params.clone();
    let mut g = Graph::new();
    let loss = build(&mut g, &mut work)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = params.tensors().map(|(n, _)| n.clone()).collect();
    for leaf in names {
        let analytic = grads
            .get(&leaf)
            .ok_or_else(|| Error::Graph(format!("{name}: no gradient for `{leaf}`")))?;
        let numel = params.tensor(&leaf)?.numel();
        for _ in 0..cfg.probes.min(numel) {
            let i = rng.random_range(0..numel);
            let mut p = params.clone();
            let x0 = p.tensor(&leaf)?.data()[i];
            p.tensor_mut(&leaf)?.data_mut()[i] = x0 + cfg.step;
            let up = loss_value(&p, build)?;
            p.tensor_mut(&leaf)?.data_mut()[i] = x0 - cfg.step;
            let down = loss_value(&p, build)?;
            let numeric = (up - down) / (2.0 * cfg.step);
            max_err = max_err.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
    })
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A tiny configuration of the full network at 32×32.
pub fn reduced_model_config(head: HeadVariant) -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        branch_channels: [3, 4, 5, 6],
        blocks_per_stage: [1, 1, 1, 1],
        head,
        input_size: (32, 32),
        bn: BnConfig::default(),
    }
}

/// Gradient check of `grasp_loss(model(x), target)` for the given config.
pub fn check_model(config: &ModelConfig, batch: usize, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (h, w) = config.input_size;
    let mut params: ParamStore<f64> = init_params(config, cfg.seed).cast();
    params.insert("input", random(Shape::new(batch, config.input_channels, h, w), &mut rng));
    let target = Tensor::from_fn(Shape::new(batch, 4, h, w), |_| rng.random_range(0.0..1.0));
    let label = format!("hrgnet {h}x{w} {}", config.head);
    let config = config.clone();
    let build = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
        let x = g.param("input", p.tensor("input")?.clone());
        let out = forward_graph(&config, p, g, x, Mode::Train)?;
        let t = g.input(target.clone());
        grasp_loss(g, out, t)
    };
    check(&label, &params, &build, cfg)
}

/// One case per differentiable op plus the reduced network.
pub fn default_suite(cfg: &GradCheckConfig) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let s = Shape::new(2, 3, 6, 5);

    // Weighted sum so every output element carries a distinct slope.
    let probe = random(Shape::new(2, 6, 12, 10), &mut rng);
    let project = move |g: &mut Graph<f64>, y: NodeId| -> Result<NodeId> {
        let ys = g.shape(y);
        let w = Tensor::from_fn(ys, |[n, c, h, x]| probe.at(n % 2, c % 6, h % 12, x % 10));
        let w = g.input(w);
        let zero = g.input(Tensor::zeros(ys));
        let d = g.add(y, w)?;
        g.squared_error(d, zero, 0.5)
    };

    for (k, stride, label) in [(3, 1, "conv2d 3x3 s1"), (3, 2, "conv2d 3x3 s2"), (1, 1, "conv2d 1x1")] {
        let mut p = ParamStore::new();
        p.insert("x", random(s, &mut rng));
        p.insert("w", random(Shape::new(4, 3, k, k), &mut rng));
        p.insert("b", random(Shape::new(1, 4, 1, 1), &mut rng));
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let x = g.param("x", p.tensor("x")?.clone());
            let w = g.param("w", p.tensor("w")?.clone());
            let b = g.param("b", p.tensor("b")?.clone());
            let y = g.conv2d(x, w, b, stride, k / 2)?;
            project(g, y)
        };
        reports.push(check(label, &p, &f, cfg)?);
    }

    for scale in [2usize, 4] {
        let mut p = ParamStore::new();
        p.insert("x", random(Shape::new(1, 2, 3, 2), &mut rng));
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let x = g.param("x", p.tensor("x")?.clone());
            let y = g.upsample(x, scale)?;
            project(g, y)
        };
        reports.push(check(&format!("upsample x{scale}"), &p, &f, cfg)?);
    }

    for mode in [Mode::Train, Mode::Eval] {
        let mut p = ParamStore::new();
        p.insert("x", random(s, &mut rng));
        p.insert("gamma", random(Shape::new(1, 3, 1, 1), &mut rng));
        p.insert("beta", random(Shape::new(1, 3, 1, 1), &mut rng));
        let stats = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 0.8],
            initialized: true,
        };
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let x = g.param("x", p.tensor("x")?.clone());
            let gm = g.param("gamma", p.tensor("gamma")?.clone());
            let bt = g.param("beta", p.tensor("beta")?.clone());
            let mut st = stats.clone();
            let y = g.batchnorm2d(x, gm, bt, &mut st, BnConfig::default(), mode)?;
            project(g, y)
        };
        let label = match mode {
            Mode::Train => "batchnorm train",
            Mode::Eval => "batchnorm eval",
        };
        reports.push(check(label, &p, &f, cfg)?);
    }

    type Unary = fn(&mut Graph<f64>, NodeId) -> NodeId;
    let unary: [(&str, Unary); 5] = [
        ("relu", |g, x| g.relu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("sum", |g, x| g.sum(x)),
        ("mean", |g, x| g.mean(x)),
    ];
    for (label, op) in unary {
        let mut p = ParamStore::new();
        // keep relu inputs away from the kink
        let x = random(s, &mut rng);
        let x = Tensor::new(s, x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect())?;
        p.insert("x", x);
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let x = g.param("x", p.tensor("x")?.clone());
            let y = op(g, x);
            project(g, y)
        };
        reports.push(check(label, &p, &f, cfg)?);
    }

    let mut p = ParamStore::new();
    p.insert("a", random(s, &mut rng));
    p.insert("b", random(s, &mut rng));
    p.insert("c", random(Shape::new(2, 2, 6, 5), &mut rng));
    {
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let a = g.param("a", p.tensor("a")?.clone());
            let b = g.param("b", p.tensor("b")?.clone());
            let y = g.add(a, b)?;
            let y = g.add(y, a)?;
            project(g, y)
        };
        let mut q = ParamStore::new();
        q.insert("a", p.tensor("a")?.clone());
        q.insert("b", p.tensor("b")?.clone());
        reports.push(check("add (with fan-out)", &q, &f, cfg)?);
    }
    {
        let project = project.clone();
        let f = move |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let a = g.param("a", p.tensor("a")?.clone());
            let c = g.param("c", p.tensor("c")?.clone());
            let y = g.concat(&[c, a, c])?;
            let y = g.channel_slice(y, 1, 5)?;
            project(g, y)
        };
        let mut q = ParamStore::new();
        q.insert("a", p.tensor("a")?.clone());
        q.insert("c", p.tensor("c")?.clone());
        reports.push(check("concat + channel slice", &q, &f, cfg)?);
    }
    {
        let f = |g: &mut Graph<f64>, p: &mut ParamStore<f64>| -> Result<NodeId> {
            let a = g.param("a", p.tensor("a")?.clone());
            let b = g.param("b", p.tensor("b")?.clone());
            grasp_loss(g, a, b)
        };
        let mut q = ParamStore::new();
        q.insert("a", p.tensor("a")?.clone());
        q.insert("b", p.tensor("b")?.clone());
        reports.push(check("grasp loss", &q, &f, cfg)?);
    }

    for head in [HeadVariant::Fused, HeadVariant::HighestOnly] {
        reports.push(check_model(&reduced_model_config(head), 4, cfg)?);
    }
    Ok(reports)
}
