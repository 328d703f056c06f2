//! Paint a grasp rectangle into quality/angle/width maps and decode it back.
//!
//! `cargo run --example codec_round_trip -- [x y theta width]`

use hrgnet::codec::{decode_grasps, encode_labels, DecodeConfig, GraspRectangle};

fn main() -> hrgnet::Result<()> {
    let v: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let g = match v[..] {
        [x, y, theta, w] => GraspRectangle::new(x, y, theta, w, 0.0),
        _ => GraspRectangle::new(100.0, 60.0, 0.3, 80.0, 0.0),
    };
    let maps = encode_labels(&[g], 224, 224);
    let painted = maps.quality.iter().filter(|q| **q > 0.0).count();
    println!("label    {:.3} {:.3} {:.4} {:.3}  ({painted} pixels painted)", g.x, g.y, g.theta, g.width);
    for d in decode_grasps(&maps, &DecodeConfig::default())? {
        println!("decoded  {d}");
    }
    Ok(())
}
