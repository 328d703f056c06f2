//! Decode grasps from a synthetic two-object scene and save the overlay.
//! Uses a checkpoint when one is given, otherwise the ground-truth oracle.
//!
//! `cargo run --release --example predict_overlay -- out.png [model.ckpt]`

use hrgnet::codec::{decode_grasps, DecodeConfig};
use hrgnet::data::synthetic::{generate, SyntheticConfig};
use hrgnet::data::preprocess::apply_transform;
use hrgnet::data::{save_rgb, Channels, PrepConfig, Transform};
use hrgnet::draw::draw_grasp;
use hrgnet::eval::{GraspPredictor, OracleModel};
use hrgnet::model::Model;
use hrgnet::tensor::checkpoint::Checkpoint;

fn main() -> hrgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "overlay.png".into());
    let (mut model, size): (Box<dyn GraspPredictor>, usize) = match args.next() {
        Some(p) => {
            let m = Model::from_checkpoint(&Checkpoint::load(p.as_ref())?)?;
            let size = m.config().input_size.0;
            (Box::new(m), size)
        }
        None => (Box::new(OracleModel), 128),
    };
    let data = generate(&SyntheticConfig {
        size: 128,
        count: 1,
        objects_per_image: 2,
        seed: 5,
    })?;
    let sample = &data.samples[0];
    let t = Transform::centered(128, 128, size);
    let prepared = apply_transform(sample, &PrepConfig::new(Channels::Rgbd, size), &t)?;
    let maps = model.predict(&prepared)?;
    let mut img = sample.rgb.clone().expect("synthetic samples carry rgb");
    for d in decode_grasps(&maps, &DecodeConfig { k: 3, ..Default::default() })? {
        let (x, y) = t.unmap_point((d.rect.x, d.rect.y), size);
        let rect = hrgnet::codec::GraspRectangle::new(x, y, d.rect.theta - t.angle(), d.rect.width * t.zoom, 0.0);
        println!("{x:.1} {y:.1} {:.3} {:.1}  q {:.3}", rect.theta, rect.width, d.quality);
        draw_grasp(&mut img, &rect);
    }
    save_rgb(&img, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
