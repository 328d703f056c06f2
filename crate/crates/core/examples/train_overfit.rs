//! Overfit eight synthetic scenes and report loss and training accuracy.
//!
//! `cargo run --release --example train_overfit -- [steps] [lr]`

use hrgnet::data::synthetic::{generate, SyntheticConfig};
use hrgnet::data::Channels;
use hrgnet::model::ModelConfig;
use hrgnet::train::{train, TrainConfig, TrainJob};

fn main() -> hrgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let size = 64;
    let dataset = generate(&SyntheticConfig {
        size,
        count: 8,
        ..Default::default()
    })?;
    let all: Vec<usize> = (0..8).collect();
    let job = TrainJob {
        dataset: &dataset,
        train: all.clone(),
        test: all,
        channels: Channels::Rgbd,
        model: ModelConfig {
            input_size: (size, size),
            ..Default::default()
        },
        config: TrainConfig {
            lr,
            batch_size: 8,
            epochs: steps,
            eval_every: 25,
            augment: false,
            ..Default::default()
        },
        out_dir: None,
        resume: None,
    };
    let t = std::time::Instant::now();
    let out = train(&job)?;
    for row in out.log.iter().filter(|r| r.accuracy.is_some() || r.epoch == 1) {
        println!("step {:4}  loss {:.5}  accuracy {:?}", row.epoch, row.train_loss, row.accuracy);
    }
    println!("{:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}
