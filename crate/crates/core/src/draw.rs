//! Grasp overlays: jaw plates in red, opening sides in blue, centre in
//! yellow, all one pixel wide.

use image::{Rgb, RgbImage};

use crate::codec::{GraspRectangle, JAW_ASPECT};
use crate::data::{is_valid_depth, DepthImage};

pub const JAW_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const SIDE_COLOR: Rgb<u8> = Rgb([0, 64, 255]);
pub const CENTER_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Straight segment, one pixel per step along the major axis.
pub fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

pub fn draw_grasp(img: &mut RgbImage, g: &GraspRectangle) {
    let k = g.corners(JAW_ASPECT);
    draw_line(img, k[1], k[2], SIDE_COLOR);
    draw_line(img, k[3], k[0], SIDE_COLOR);
    // plates: corners 0-1 and 2-3
    draw_line(img, k[0], k[1], JAW_COLOR);
    draw_line(img, k[2], k[3], JAW_COLOR);
    let (cx, cy) = (g.x.round() as i64, g.y.round() as i64);
    for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
        put(img, cx + dx, cy + dy, CENTER_COLOR);
    }
}

/// Depth rendered as grey, near = bright; invalid pixels black.
pub fn depth_to_rgb(d: &DepthImage) -> RgbImage {
    let valid = d.data.iter().copied().filter(|v| is_valid_depth(*v));
    let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(d.width as u32, d.height as u32, |x, y| {
        let v = d.at(x as usize, y as usize);
        if !is_valid_depth(v) {
            return Rgb([0, 0, 0]);
        }
        let g = (255.0 * (1.0 - (v - lo) / span)).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}
