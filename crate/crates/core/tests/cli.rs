use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use hrgnet::cli::{main_with, resolve, Cli};
use hrgnet::codec::Detection;
use hrgnet::data::synthetic::{generate, SyntheticConfig};
use hrgnet::data::{save_depth_tiff, save_rgb, DepthImage};
use hrgnet::eval::parse_results;
use tempfile::TempDir;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn hrgnet(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("hrgnet").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "input_size=32",
    "--set", "branch_channels=4,8,16,32",
    "--set", "blocks_per_stage=1,1,1,1",
    "--set", "synthetic_count=4",
    "--set", "train_on_test=true",
    "--set", "epochs=2",
    "--set", "batch_size=2",
    "--set", "augment=false",
    "--set", "lr=0.001",
];

fn train_tiny(out: &Path, seed: &str) -> Run {
    let mut args = vec!["train", "--seed", seed, "--out", s(out)];
    args.extend_from_slice(TINY);
    hrgnet(&args)
}

#[test]
fn help_and_bad_usage() {
    let r = hrgnet(&["--help"]);
    assert_eq!(r.code, 0);
    for cmd in ["train", "eval", "predict", "gradcheck", "simulate"] {
        assert!(r.err.contains(cmd) || r.out.contains(cmd), "{cmd} missing from help");
    }
    assert_ne!(hrgnet(&["fly"]).code, 0);
    assert_ne!(hrgnet(&["eval"]).code, 0, "eval needs --checkpoint or --oracle");
}

#[test]
fn layering_flags_over_file_over_preset() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "epochs = 3\nseed = 5\nlr = 0.5\n").unwrap();
    let cli = Cli::try_parse_from([
        "hrgnet", "train", "--overfit", "--config", s(&file), "--seed", "9", "--set", "batch_size=4",
    ])
    .unwrap();
    let cfg = resolve(&cli).unwrap();
    assert_eq!(cfg.get("epochs"), "3");
    assert_eq!(cfg.get("seed"), "9");
    assert_eq!(cfg.get("lr"), "0.5");
    assert_eq!(cfg.get("batch_size"), "4");
    assert_eq!(cfg.get("input_size"), "64", "preset value survives");
    assert_eq!(cfg.get("weight_decay"), "0.05", "default survives");

    let r = hrgnet(&["gradcheck", "--set", "colour=red"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("colour"), "{}", r.err);
}

#[test]
fn missing_dataset_root_names_path_and_marks_failure() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("no_such_dataset");
    let r = hrgnet(&["train", "--dataset", "cornell", "--dataset-root", s(&missing), "--out", s(&out)]);
    assert_ne!(r.code, 0);
    assert!(r.err.contains("no_such_dataset"), "{}", r.err);
    assert!(out.join("FAILED").exists());
    assert!(out.join("config.txt").exists());
}

#[test]
fn success_clears_stale_failure_marker() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("FAILED"), "old\n").unwrap();
    let r = hrgnet(&["simulate", "--set", "episodes=2", "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(!dir.path().join("FAILED").exists());
    let frozen = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(frozen.contains("episodes = 2"));
}

#[test]
fn train_is_deterministic_and_eval_checks_channels() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let r = train_tiny(d, "4");
        assert_eq!(r.code, 0, "{}", r.err);
    }
    assert_eq!(train_tiny(&c, "5").code, 0);
    let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).unwrap();
    for f in ["metrics.log", "last.ckpt", "epoch_001.ckpt", "config.txt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs between identical runs");
    }
    assert_ne!(read(&a, "last.ckpt"), read(&c, "last.ckpt"));

    let ckpt = a.join("last.ckpt");
    let r = hrgnet(&["eval", "--checkpoint", s(&ckpt), "--channels", "d", "--set", "input_size=32"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("channels"), "{}", r.err);

    let missing = a.join("nope.ckpt");
    assert_eq!(hrgnet(&["eval", "--checkpoint", s(&missing)]).code, 1);

    let out = dir.path().join("eval");
    let r = hrgnet(&[
        "eval", "--checkpoint", s(&ckpt), "--set", "synthetic_count=20", "--set", "input_size=32",
        "--set", "fold=all", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rows = parse_results(&r.out).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5].0, "mean");
    let mean = rows[..5].iter().map(|r| r.1).sum::<f64>() / 5.0;
    assert!((rows[5].1 - mean).abs() < 1e-9);
    assert_eq!(fs::read_to_string(out.join("results.txt")).unwrap(), r.out);
    assert!(out.join("timing.txt").exists());
}

#[test]
fn eval_oracle_and_fold_range() {
    let r = hrgnet(&["eval", "--oracle", "--set", "input_size=64", "--set", "synthetic_count=10"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rows = parse_results(&r.out).unwrap();
    assert!(rows.iter().all(|(_, acc)| *acc == 1.0), "{}", r.out);

    let r = hrgnet(&["eval", "--oracle", "--set", "fold=5"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("fold"));
}

/// Writes a synthetic sample's images and labels; returns (rgb, depth, labels, rects).
fn write_sample(dir: &Path, objects: usize, seed: u64) -> (PathBuf, PathBuf, PathBuf, Vec<(f64, f64)>) {
    let data = generate(&SyntheticConfig {
        size: 64,
        count: 1,
        objects_per_image: objects,
        seed,
    })
    .unwrap();
    let sample = &data.samples[0];
    let (rgb, depth, labels) = (dir.join("scene.png"), dir.join("scene.tiff"), dir.join("scene.txt"));
    save_rgb(sample.rgb.as_ref().unwrap(), &rgb).unwrap();
    save_depth_tiff(sample.depth.as_ref().unwrap(), &depth).unwrap();
    let text: String = sample
        .rects
        .iter()
        .map(|r| format!("{} {} {} {}\n", r.x, r.y, r.theta, r.width))
        .collect();
    fs::write(&labels, text).unwrap();
    (rgb, depth, labels, sample.rects.iter().map(|r| (r.x, r.y)).collect())
}

fn detections(text: &str) -> Vec<Detection> {
    text.lines().map(|l| l.parse().unwrap()).collect()
}

#[test]
fn predict_oracle_recovers_labels() {
    let dir = TempDir::new().unwrap();
    let (rgb, depth, labels, centers) = write_sample(dir.path(), 1, 3);
    let out = dir.path().join("pred");
    let r = hrgnet(&[
        "predict", "--oracle", "--labels", s(&labels), "--rgb", s(&rgb), "--depth", s(&depth),
        "--set", "input_size=64", "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let dets = detections(&fs::read_to_string(out.join("scene.grasps.txt")).unwrap());
    assert_eq!(dets.len(), 1);
    let d = &dets[0].rect;
    let near = centers.iter().map(|c| (c.0 - d.x).hypot(c.1 - d.y)).fold(f64::MAX, f64::min);
    assert!(near <= 2.0, "decoded centre {near:.2} px from nearest label");
    let overlay = image::open(out.join("scene.overlay.png")).unwrap().to_rgb8();
    assert_eq!(overlay.dimensions(), (64, 64));
    assert!(overlay.pixels().any(|p| *p == hrgnet::draw::JAW_COLOR));
}

#[test]
fn predict_top_k_sorted() {
    let dir = TempDir::new().unwrap();
    let (rgb, depth, labels, _) = write_sample(dir.path(), 2, 11);
    let r = hrgnet(&[
        "predict", "--oracle", "--labels", s(&labels), "--rgb", s(&rgb), "--depth", s(&depth),
        "--set", "input_size=64", "--k", "3", "--out", s(dir.path()),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let dets = detections(&r.out);
    assert!(!dets.is_empty() && dets.len() <= 3, "{}", r.out);
    assert!(dets.windows(2).all(|w| w[0].quality >= w[1].quality));
}

#[test]
fn predict_blank_depth_and_unreadable_image() {
    let dir = TempDir::new().unwrap();
    let black = dir.path().join("black.tiff");
    save_depth_tiff(&DepthImage::filled(64, 64, 0.0), &black).unwrap();
    let labels = dir.path().join("l.txt");
    fs::write(&labels, "32 32 0 20\n").unwrap();
    let r = hrgnet(&[
        "predict", "--oracle", "--labels", s(&labels), "--channels", "d", "--depth", s(&black),
        "--set", "input_size=64", "--out", s(dir.path()),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("no grasp"));
    assert_eq!(fs::read_to_string(dir.path().join("black.grasps.txt")).unwrap(), "");

    let junk = dir.path().join("junk.tiff");
    fs::write(&junk, b"not an image").unwrap();
    let r = hrgnet(&[
        "predict", "--oracle", "--labels", s(&labels), "--channels", "d", "--depth", s(&junk),
        "--out", s(dir.path()),
    ]);
    assert_ne!(r.code, 0);
    assert!(dir.path().join("FAILED").exists());
}

#[test]
fn simulate_reports_both_policies_and_traces() {
    let dir = TempDir::new().unwrap();
    let r = hrgnet(&["simulate", "--seed", "3", "--set", "episodes=4", "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("closed_loop") && r.out.contains("single_shot"));
    assert!(r.out.contains("3,4,5,6"), "{}", r.out);
    for seed in 3..7 {
        assert!(dir.path().join(format!("traces/scene_{seed:04}.txt")).exists());
    }
    let again = hrgnet(&["simulate", "--seed", "3", "--set", "episodes=4"]);
    assert_eq!(again.out, r.out);
}

#[test]
fn simulate_oracle_isolated_objects_always_succeed() {
    let r = hrgnet(&[
        "simulate", "--set", "sim_model=oracle", "--set", "scene_objects=1", "--set", "episodes=100",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let closed = r.out.lines().find(|l| l.starts_with("closed_loop")).unwrap();
    assert_eq!(closed.split('\t').nth(2), Some("1.00"), "{}", r.out);
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let r = hrgnet(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.lines().skip(1).all(|l| l.ends_with("\tok")), "{}", r.out);
    assert!(dir.path().join("gradcheck.txt").exists());
}
