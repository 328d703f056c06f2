//! Oriented-rectangle IoU and the rectangle metric on a few hand-picked pairs.

use hrgnet::codec::GraspRectangle;
use hrgnet::eval::{is_match, polygon_iou, rect_iou};

fn main() {
    let square = |x: f64, y: f64| [(x, y), (x + 1.0, y), (x + 1.0, y + 1.0), (x, y + 1.0)];
    println!("unit squares offset (0.5,0.5): IoU {:.6}", polygon_iou(&square(0.0, 0.0), &square(0.5, 0.5)));

    let gt = GraspRectangle::new(50.0, 50.0, 0.0, 40.0, 0.0);
    let cases = [
        ("identical", gt),
        ("shifted 8 px", GraspRectangle::new(58.0, 50.0, 0.0, 40.0, 0.0)),
        ("rotated 25 deg", GraspRectangle::new(50.0, 50.0, 25f64.to_radians(), 40.0, 0.0)),
        ("rotated 35 deg", GraspRectangle::new(50.0, 50.0, 35f64.to_radians(), 40.0, 0.0)),
        ("half width", GraspRectangle::new(50.0, 50.0, 0.0, 20.0, 0.0)),
        ("flipped 180 deg", GraspRectangle::new(50.0, 50.0, std::f64::consts::PI, 40.0, 0.0)),
    ];
    for (name, p) in cases {
        println!("{name:<16} IoU {:.3}  match {}", rect_iou(&p, &gt), is_match(&p, &[gt]));
    }
}
