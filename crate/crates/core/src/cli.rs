//! The `hrgnet` command line: train, eval, predict, gradcheck and simulate.
//!
//! Each run resolves a [`RunConfig`], writes it to `<out>/config.txt` and, if
//! the command fails, leaves `<out>/FAILED` holding the error message.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{decode_grasps, DecodeConfig, Detection, GraspRectangle};
use crate::config::{RunConfig, OVERFIT_PRESET};
use crate::data::preprocess::apply_transform;
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{load_dataset, load_depth, load_rgb, split, Dataset, PrepConfig, Provenance, Sample, Transform};
use crate::draw::{depth_to_rgb, draw_grasp};
use crate::error::{Error, Result};
use crate::eval::{evaluate, results_table, timing_table, EvalConfig, FoldResult, GraspPredictor, OracleModel};
use crate::gradcheck::{default_suite, GradCheckConfig};
use crate::model::Model;
use crate::sim::{
    run_episode, run_single_shot, trace_table, GroundTruthOracle, NetworkModel, NoisyOracle, PolicyComparison,
    ViewModel,
};
use crate::sim::{make_scene, ScenePlan};
use crate::tensor::checkpoint::Checkpoint;
use crate::train::{metrics_log, train, TrainJob};

/// Largest relative error a gradient case may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "hrgnet", version, about = "Grasp detection: train, evaluate, predict, check gradients, simulate")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` file applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// d, rgb or rgbd.
    #[arg(long, global = true)]
    pub channels: Option<String>,
    /// cornell, jacquard or synthetic.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long = "dataset-root", global = true)]
    pub dataset_root: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on one fold and write checkpoints and logs.
    Train {
        /// Eight synthetic samples, 200 steps, evaluated on themselves.
        #[arg(long)]
        overfit: bool,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rectangle-metric accuracy per fold plus the mean.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the rasterized ground truth instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Decode grasps on one image and draw them.
    Predict {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Decode the painted labels from `--labels` instead of a network.
        #[arg(long, conflicts_with = "checkpoint", requires = "labels")]
        oracle: bool,
        /// Lines of `x y theta w` in image pixels.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        rgb: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Number of grasps to return.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Finite-difference check of every differentiable op and a small network.
    Gradcheck,
    /// Closed-loop vs single-shot grasping over seeded scenes.
    Simulate {
        /// Depth-only network used as the perception model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Resolve the effective configuration: defaults, preset, file, flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Command::Train { overfit: true, .. } = cli.command {
        cfg.apply(OVERFIT_PRESET)?;
    }
    let c = &cli.common;
    if let Some(p) = &c.config {
        cfg.merge_file(p)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(ch) = &c.channels {
        cfg.set("channels", ch)?;
    }
    if let Some(d) = &c.dataset {
        cfg.set("dataset", d)?;
    }
    if let Some(r) = &c.dataset_root {
        cfg.set("dataset_root", &r.to_string_lossy())?;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Command::Predict { k: Some(k), .. } = cli.command {
        cfg.set("k", &k.to_string())?;
    }
    if let Command::Simulate { checkpoint: Some(_) } = cli.command {
        cfg.set("sim_model", "network")?;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return e.exit_code();
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

/// Run one command. With `--out`, the directory gets `config.txt` and, on
/// failure, a `FAILED` marker.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let out = cli.common.out.clone();
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let marker = dir.join("FAILED");
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
    }
    let result = resolve(cli).and_then(|cfg| {
        if let Some(dir) = &out {
            write(&dir.join("config.txt"), &cfg.to_string())?;
        }
        log::info!("effective config:\n{cfg}");
        match &cli.command {
            Command::Train { resume, .. } => cmd_train(&cfg, resume.as_deref(), out.as_deref(), stdout),
            Command::Eval { checkpoint, .. } => cmd_eval(&cfg, checkpoint.as_deref(), out.as_deref(), stdout),
            Command::Predict {
                checkpoint,
                labels,
                rgb,
                depth,
                ..
            } => cmd_predict(
                &cfg,
                checkpoint.as_deref(),
                labels.as_deref(),
                rgb.as_deref(),
                depth.as_deref(),
                out.as_deref(),
                stdout,
            ),
            Command::Gradcheck => cmd_gradcheck(&cfg, out.as_deref(), stdout),
            Command::Simulate { checkpoint } => cmd_simulate(&cfg, checkpoint.as_deref(), out.as_deref(), stdout),
        }
    });
    if let (Err(e), Some(dir)) = (&result, &out) {
        let _ = fs::write(dir.join("FAILED"), format!("{e}\n"));
    }
    result
}

/// The dataset named by the config; synthetic sets are generated at the
/// model input size.
pub fn load_configured_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let kind: Provenance = cfg.get("dataset").parse()?;
    if kind == Provenance::Synthetic {
        return generate(&SyntheticConfig {
            size: cfg.parse("input_size")?,
            count: cfg.parse("synthetic_count")?,
            objects_per_image: cfg.parse("synthetic_objects")?,
            seed: cfg.seed()?,
        });
    }
    let root = cfg.get("dataset_root");
    if root.is_empty() {
        return Err(Error::config("dataset_root", format!("{kind} needs --dataset-root")));
    }
    let root = Path::new(root);
    if !root.is_dir() {
        return Err(Error::config(
            "dataset_root",
            format!("{} does not exist or is not a directory", root.display()),
        ));
    }
    load_dataset(kind, root)
}

/// Fold number, train indices, test indices.
type FoldPlan = (usize, Vec<usize>, Vec<usize>);

fn folds(cfg: &RunConfig, data: &Dataset, all_allowed: bool) -> Result<Vec<FoldPlan>> {
    if cfg.flag("train_on_test")? {
        let all = data.usable_indices();
        return Ok(vec![(0, all.clone(), all)]);
    }
    let n: usize = cfg.parse("folds")?;
    let folds = split(data, cfg.split_mode()?, n, cfg.seed()?)?;
    let pick: Vec<usize> = match cfg.fold()? {
        None if all_allowed => (0..folds.len()).collect(),
        None => return Err(Error::config("fold", "this command needs a single fold index")),
        Some(i) if i < folds.len() => vec![i],
        Some(i) => {
            return Err(Error::config(
                "fold",
                format!("{i} is out of range; there are {} folds (0..{})", folds.len(), folds.len() - 1),
            ))
        }
    };
    let usable = |v: &[usize]| v.iter().copied().filter(|&i| data.samples[i].usable()).collect();
    Ok(pick
        .into_iter()
        .map(|i| (i, usable(&folds[i].train), folds[i].test.clone()))
        .collect())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let model = cfg.model_config()?;
    let config = cfg.train_config()?;
    let data = load_configured_dataset(cfg)?;
    let (_, train_idx, test_idx) = folds(cfg, &data, false)?.remove(0);
    let job = TrainJob {
        dataset: &data,
        train: train_idx,
        test: test_idx,
        channels: cfg.channels()?,
        model,
        config,
        out_dir: out.map(Path::to_path_buf),
        resume: resume.map(Path::to_path_buf),
    };
    let outcome = train(&job)?;
    say(stdout, &metrics_log(&outcome.log))?;
    if let Some((epoch, acc)) = outcome.best {
        say(stdout, &format!("best\t{epoch}\t{acc}\n"))?;
    }
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model> {
    if !path.exists() {
        return Err(Error::config("checkpoint", format!("{} does not exist", path.display())));
    }
    let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    let channels = cfg.channels()?;
    if model.config().input_channels != channels.count() {
        return Err(Error::config(
            "channels",
            format!(
                "checkpoint {} expects {} input channels but channels = {channels} gives {}",
                path.display(),
                model.config().input_channels,
                channels.count()
            ),
        ));
    }
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let channels = cfg.channels()?;
    let (mut predictor, method, size): (Box<dyn GraspPredictor>, String, usize) = match checkpoint {
        Some(p) => {
            let m = load_model(p, cfg)?;
            let size = m.config().input_size.0;
            let method = format!("hrgnet-{}", m.config().head);
            (Box::new(m), method, size)
        }
        None => (Box::new(OracleModel), "oracle".to_string(), cfg.parse("input_size")?),
    };
    let data = load_configured_dataset(cfg)?;
    let eval_cfg = EvalConfig::new(channels, size);
    let mut results = Vec::new();
    for (fold, _, test) in folds(cfg, &data, true)? {
        let metrics = evaluate(predictor.as_mut(), &data, &test, &eval_cfg)?;
        results.push(FoldResult { fold, metrics });
    }
    let table = results_table(&method, channels, cfg.split_mode()?, &results);
    say(stdout, &table)?;
    if let Some(dir) = out {
        write(&dir.join("results.txt"), &table)?;
        write(&dir.join("timing.txt"), &timing_table(&results))?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<GraspRectangle>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .take(4)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("line {}: expected x y theta w", n + 1)))?;
            if v.len() < 4 {
                return Err(Error::parse(path, format!("line {}: expected x y theta w", n + 1)));
            }
            Ok(GraspRectangle::new(v[0], v[1], v[2], v[3], 0.0))
        })
        .collect()
}

fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    labels: Option<&Path>,
    rgb_path: Option<&Path>,
    depth_path: Option<&Path>,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let channels = cfg.channels()?;
    let rgb = match (channels.uses_rgb(), rgb_path) {
        (true, Some(p)) => Some(load_rgb(p)?),
        (true, None) => return Err(Error::config("rgb", format!("channels = {channels} needs --rgb"))),
        (false, _) => None,
    };
    let depth = match (channels.uses_depth(), depth_path) {
        (true, Some(p)) => Some(load_depth(p)?),
        (true, None) => return Err(Error::config("depth", format!("channels = {channels} needs --depth"))),
        (false, _) => None,
    };
    let rects = labels.map(read_labels).transpose()?.unwrap_or_default();
    let source = rgb_path.or(depth_path).expect("at least one input is required");
    let sample = Sample::new(rgb, depth, rects, "predict", source.to_string_lossy())?;

    let (mut predictor, size): (Box<dyn GraspPredictor>, usize) = match checkpoint {
        Some(p) => {
            let m = load_model(p, cfg)?;
            let size = m.config().input_size.0;
            (Box::new(m), size)
        }
        None => (Box::new(OracleModel), cfg.parse("input_size")?),
    };
    let (w, h) = sample.size();
    let t = Transform::centered(w, h, size);
    let prepared = apply_transform(&sample, &PrepConfig::new(channels, size), &t)?;
    let k: usize = cfg.parse("k")?;
    let blank = sample.depth.as_ref().is_some_and(|d| !d.has_valid());
    let dets: Vec<Detection> = if blank {
        Vec::new()
    } else {
        let maps = predictor.predict(&prepared)?;
        decode_grasps(&maps, &DecodeConfig { k, ..DecodeConfig::default() })?
        .into_iter()
        .map(|d| {
            let (x, y) = t.unmap_point((d.rect.x, d.rect.y), size);
            Detection {
                rect: GraspRectangle::new(x, y, d.rect.theta - t.angle(), d.rect.width * t.zoom, d.rect.z),
                quality: d.quality,
            }
        })
        .collect()
    };

    let lines: String = dets.iter().map(|d| format!("{d}\n")).collect();
    if dets.is_empty() {
        say(stdout, "no grasp\n")?;
    } else {
        say(stdout, &lines)?;
    }
    let dir = out.unwrap_or(Path::new("."));
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    write(&dir.join(format!("{stem}.grasps.txt")), &lines)?;
    let mut canvas = match (&sample.rgb, &sample.depth) {
        (Some(rgb), _) => rgb.clone(),
        (None, Some(d)) => depth_to_rgb(d),
        (None, None) => unreachable!("Sample::new rejects empty samples"),
    };
    for d in &dets {
        draw_grasp(&mut canvas, &d.rect);
    }
    crate::data::save_rgb(&canvas, &dir.join(format!("{stem}.overlay.png")))
}

fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let reports = default_suite(&GradCheckConfig {
        seed: cfg.seed()?,
        ..GradCheckConfig::default()
    })?;
    let mut table = String::from("case\tmax_rel_err\tprobes\tstatus\n");
    for r in &reports {
        let status = if r.max_rel_err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        table.push_str(&format!("{}\t{:.3e}\t{}\t{status}\n", r.name, r.max_rel_err, r.checked));
    }
    say(stdout, &table)?;
    if let Some(dir) = out {
        write(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| r.max_rel_err >= GRADCHECK_TOLERANCE)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_simulate(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let sim = cfg.sim_config()?;
    let seed = cfg.seed()?;
    let mut network;
    let mut oracle = GroundTruthOracle::default();
    let mut noisy = NoisyOracle::new(cfg.parse("noise_center_px")?, cfg.parse("noise_angle")?, seed);
    let mut wrapped;
    let model: &mut dyn ViewModel = match cfg.get("sim_model") {
        "oracle" => &mut oracle,
        "noisy" => &mut noisy,
        "network" => {
            let path = checkpoint.ok_or_else(|| Error::config("sim_model", "network needs --checkpoint"))?;
            network = Model::from_checkpoint(&Checkpoint::load(path)?)?;
            let mc = network.config();
            if mc.input_channels != 1 || mc.input_size != (sim.camera.image_size, sim.camera.image_size) {
                return Err(Error::config(
                    "checkpoint",
                    format!(
                        "simulation needs a depth-only {0}x{0} model, got {1} channels at {2}x{3}",
                        sim.camera.image_size, mc.input_channels, mc.input_size.0, mc.input_size.1
                    ),
                ));
            }
            wrapped = NetworkModel { predictor: &mut network };
            &mut wrapped
        }
        other => {
            return Err(Error::config(
                "sim_model",
                format!("expected oracle, noisy or network, got {other:?}"),
            ))
        }
    };
    let episodes: u64 = cfg.parse("episodes")?;
    let trace_dir = out.map(|d| d.join("traces"));
    if let Some(d) = &trace_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut cmp = PolicyComparison::default();
    for s in seed..seed + episodes {
        let scene = make_scene(&ScenePlan {
            count: cfg.parse("scene_objects")?,
            family: cfg.scene_family()?,
            adjacency: cfg.parse("adjacency")?,
            seed: s,
        })?;
        let closed = run_episode(&scene, model, &sim)?;
        let single = run_single_shot(&scene, model, &sim)?;
        if closed.trace.windows(2).any(|w| w[1].view.z >= w[0].view.z) {
            return Err(Error::Invalid(format!("scene {s}: trajectory heights not strictly decreasing")));
        }
        if let Some(d) = &trace_dir {
            write(&d.join(format!("scene_{s:04}.txt")), &trace_table(&closed.trace))?;
        }
        cmp.record(s, &closed, &single);
    }
    let report = cmp.report();
    say(stdout, &report)?;
    if let Some(dir) = out {
        write(&dir.join("simulate.txt"), &report)?;
    }
    Ok(())
}
