//! Loss, AdamW and the training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{preprocess, Augment, Channels, Dataset, PrepConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{forward_graph, read_store, write_store, GraspMaps, Model, ModelConfig};
use crate::nn::{decay_exempt, ParamStore};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Gradients, Graph, Mode, NodeId, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Save `epoch_NNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-2,
            batch_size: 32,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 1,
            eval_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}

/// `(1 / 2N) Σ_i mean((pred_i - target_i)^2)` over a batch of N samples,
/// which equals the summed squared error over `2 * numel`.
pub fn grasp_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let numel = g.value(pred).numel().max(1);
    g.squared_error(pred, target, 1.0 / (2.0 * numel as f64))
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl OptState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.tensors() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        OptState {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update: decoupled decay `p ← p(1 - lr·wd)` (skipped for biases
/// and batch-norm affine parameters), then the bias-corrected Adam step.
/// Arithmetic is done in f64. Non-finite gradients abort before any change.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw", format!("{name}: grad {} vs param {}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`; optimizer step aborted")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.tensors().map(|(n, _)| n.clone()).collect();
    for name in names {
        let g = grads.get(&name).expect("checked above");
        let decay = if decay_exempt(&name) {
            1.0
        } else {
            1.0 - cfg.lr * cfg.weight_decay
        };
        let m = state.m.tensor_mut(&name)?.data_mut();
        let v = state.v.tensor_mut(&name)?.data_mut();
        let p = params.tensor_mut(&name)?.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            p[i] = (p[i] as f64 * decay - step) as f32;
        }
    }
    Ok(())
}

/// Forward, loss and gradients for one batch in training mode.
pub fn batch_gradients(
    model: &mut Model,
    inputs: &Tensor<f32>,
    targets: &Tensor<f32>,
) -> Result<(f64, Gradients<f32>)> {
    let config = model.config().clone();
    let mut g = Graph::new();
    let x = g.input(inputs.clone());
    let out = forward_graph(&config, model.params_mut(), &mut g, x, Mode::Train)?;
    let y = g.input(targets.clone());
    let loss = grasp_loss(&mut g, out, y)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

/// Deterministic part of the log: epoch, mean training loss, accuracy.
pub fn metrics_log(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tloss\taccuracy\n");
    for r in rows {
        let acc = r.accuracy.map_or("-".to_string(), |a| a.to_string());
        s.push_str(&format!("{}\t{}\t{acc}\n", r.epoch, r.train_loss));
    }
    s
}

pub fn timing_log(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tseconds\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.3}\n", r.epoch, r.seconds));
    }
    s
}

fn parse_metrics_log(text: &str) -> Vec<EpochLog> {
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            Some(EpochLog {
                epoch: f.first()?.parse().ok()?,
                train_loss: f.get(1)?.parse().ok()?,
                accuracy: f.get(2).and_then(|a| a.parse().ok()),
                seconds: 0.0,
            })
        })
        .collect()
}

/// Everything `train` needs.
#[derive(Clone, Debug)]
pub struct TrainJob<'a> {
    pub dataset: &'a Dataset,
    pub train: Vec<usize>,
    /// Evaluated after each epoch; empty disables evaluation.
    pub test: Vec<usize>,
    pub channels: Channels,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint written by an earlier run of the same job.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: OptState,
    pub log: Vec<EpochLog>,
    /// `(epoch, accuracy)` of the best evaluation.
    pub best: Option<(usize, f64)>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

/// Checkpoint holding the model, optimizer state and loop position.
pub fn training_checkpoint(model: &Model, state: &OptState, epoch: usize, best: Option<(usize, f64)>) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    write_store(&state.m, &mut ck, "adam.m.");
    write_store(&state.v, &mut ck, "adam.v.");
    ck.meta.insert("adam.t".into(), state.t.to_string());
    ck.meta.insert("train.epoch".into(), epoch.to_string());
    if let Some((e, a)) = best {
        ck.meta.insert("train.best_epoch".into(), e.to_string());
        ck.meta.insert("train.best_accuracy".into(), a.to_string());
    }
    ck
}

type Resumed = (Model, OptState, usize, Option<(usize, f64)>);

fn resume_from(path: &Path, expect: &ModelConfig) -> Result<Resumed> {
    let ck = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ck)?;
    if model.config() != expect {
        return Err(Error::config("resume", "checkpoint model config differs from the job's"));
    }
    let zeros = OptState::new(model.params());
    let meta = |k: &str| {
        ck.meta
            .get(k)
            .ok_or_else(|| Error::parse(path, format!("missing meta `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        meta(k)?
            .parse()
            .map_err(|_| Error::parse(path, format!("meta `{k}` is not an integer")))
    };
    let state = OptState {
        t: num("adam.t")?,
        m: read_store(&zeros.m, &ck, "adam.m.")?,
        v: read_store(&zeros.v, &ck, "adam.v.")?,
    };
    let epoch = num("train.epoch")? as usize;
    let best = match (ck.meta.get("train.best_epoch"), ck.meta.get("train.best_accuracy")) {
        (Some(e), Some(a)) => Some((
            e.parse().map_err(|_| Error::parse(path, "bad best epoch"))?,
            a.parse().map_err(|_| Error::parse(path, "bad best accuracy"))?,
        )),
        _ => None,
    };
    Ok((model, state, epoch, best))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run the epoch loop: seeded shuffle, preprocessing (with augmentation if
/// enabled), forward, loss, backward and AdamW per batch; evaluation,
/// logging and checkpointing per epoch.
pub fn train(job: &TrainJob) -> Result<TrainOutcome> {
    let cfg = &job.config;
    cfg.validate()?;
    if job.train.is_empty() {
        return Err(Error::Invalid("training fold is empty".into()));
    }
    if job.channels.count() != job.model.input_channels {
        return Err(Error::config(
            "channels",
            format!(
                "{} gives {} input channels, model expects {}",
                job.channels,
                job.channels.count(),
                job.model.input_channels
            ),
        ));
    }
    let size = job.model.input_size.0;
    if job.model.input_size.1 != size {
        return Err(Error::config("input_size", "training crops are square"));
    }
    let prep = PrepConfig {
        channels: job.channels,
        size,
        augment: cfg.augment.then(Augment::default),
    };
    let eval_cfg = EvalConfig::new(job.channels, size);
    if let Some(dir) = &job.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut model, mut state, start, mut best) = match &job.resume {
        Some(p) => resume_from(p, &job.model)?,
        None => {
            let m = Model::build(job.model.clone(), cfg.seed)?;
            let s = OptState::new(m.params());
            (m, s, 0, None)
        }
    };
    let mut log = Vec::new();
    if start > 0 {
        if let Some(dir) = &job.out_dir {
            if let Ok(text) = fs::read_to_string(dir.join("metrics.log")) {
                log = parse_metrics_log(&text);
                log.retain(|r| r.epoch <= start);
            }
        }
    }

    for epoch in start + 1..=cfg.epochs {
        let clock = Instant::now();
        let mut order = job.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = job
                    .dataset
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
                let p = preprocess(sample, &prep, mix(cfg.seed, epoch as u64, i as u64 + 1))?;
                inputs.push(p.input);
                targets.push(p.target);
            }
            let inputs = Tensor::stack(&inputs)?;
            let targets = GraspMaps::to_tensor(&targets)?;
            let (loss, grads) = batch_gradients(&mut model, &inputs, &targets)?;
            if !loss.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {b}");
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            adamw_step(model.params_mut(), &grads, &mut state, cfg)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let accuracy = if !job.test.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            Some(evaluate(&mut model, job.dataset, &job.test, &eval_cfg)?.accuracy())
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            train_loss,
            accuracy,
            seconds: clock.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {train_loss:.6} accuracy {accuracy:?}");
        log.push(row);

        let improved = accuracy.is_some_and(|a| best.is_none_or(|(_, b)| a > b));
        if improved {
            best = Some((epoch, accuracy.unwrap_or_default()));
        }
        if let Some(dir) = &job.out_dir {
            let ck = training_checkpoint(&model, &state, epoch, best);
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                ck.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            ck.save(&dir.join("last.ckpt"))?;
            write(&dir.join("metrics.log"), &metrics_log(&log))?;
            write(&dir.join("timing.log"), &timing_log(&log))?;
        }
    }
    Ok(TrainOutcome {
        model,
        state,
        log,
        best,
    })
}
