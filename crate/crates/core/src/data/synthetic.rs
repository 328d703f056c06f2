//! Procedural top-down scenes of boxes on a table, labelled with
//! across-the-box grasps.

use std::f64::consts::FRAC_PI_2;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, DepthImage, Provenance, Sample};
use crate::codec::GraspRectangle;
use crate::error::{Error, Result};

/// Depth of the empty table in the generated depth images.
pub const TABLE_DEPTH: f32 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    pub count: usize,
    pub objects_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 224,
            count: 8,
            objects_per_image: 1,
            seed: 0,
        }
    }
}

/// An oriented box footprint in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxObject {
    pub cx: f64,
    pub cy: f64,
    /// Direction of the long side.
    pub angle: f64,
    pub length: f64,
    pub breadth: f64,
    pub height: f32,
    pub color: [u8; 3],
}

impl BoxObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (dx * c + dy * s).abs() <= self.length / 2.0 && (-dx * s + dy * c).abs() <= self.breadth / 2.0
    }

    /// Grasps across the short side at the centre and a quarter length
    /// either way.
    pub fn grasps(&self, margin: f64) -> Vec<GraspRectangle> {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        [0.0, -0.25, 0.25]
            .iter()
            .map(|t| {
                let off = t * self.length;
                GraspRectangle::new(
                    self.cx + off * c,
                    self.cy + off * s,
                    self.angle,
                    self.breadth + margin,
                    self.height as f64,
                )
            })
            .collect()
    }
}

fn random_box(size: f64, rng: &mut ChaCha8Rng) -> BoxObject {
    BoxObject {
        cx: rng.random_range(0.3 * size..0.7 * size),
        cy: rng.random_range(0.3 * size..0.7 * size),
        angle: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
        length: rng.random_range(0.35 * size..0.5 * size),
        breadth: rng.random_range(0.16 * size..0.24 * size),
        height: rng.random_range(0.03..0.08),
        color: [
            rng.random_range(120..=255),
            rng.random_range(40..=200),
            rng.random_range(0..=120),
        ],
    }
}

/// Render boxes into a sample; later boxes are drawn on top.
pub fn render_boxes(size: usize, boxes: &[BoxObject], noise_seed: u64, id: &str) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut rgb = RgbImage::new(size as u32, size as u32);
    let mut depth = DepthImage::filled(size, size, TABLE_DEPTH);
    for y in 0..size {
        for x in 0..size {
            let mut px = {
                let g = 90 + rng.random_range(0..12u8);
                [g, g, g]
            };
            let mut d = TABLE_DEPTH;
            for b in boxes {
                if b.contains(x as f64, y as f64) {
                    px = b.color;
                    d = TABLE_DEPTH - b.height;
                }
            }
            // sparse sensor dropouts
            if rng.random_range(0..400) == 0 {
                d = 0.0;
            }
            rgb.put_pixel(x as u32, y as u32, Rgb(px));
            depth.data[y * size + x] = d;
        }
    }
    let margin = 0.05 * size as f64;
    let rects = boxes.iter().flat_map(|b| b.grasps(margin)).collect();
    Sample::new(Some(rgb), Some(depth), rects, id, format!("synthetic:{id}"))
}

fn separated(a: &BoxObject, b: &BoxObject) -> bool {
    let ra = 0.5 * a.length.hypot(a.breadth);
    let rb = 0.5 * b.length.hypot(b.breadth);
    (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.size < 16 || cfg.objects_per_image == 0 {
        return Err(Error::config("synthetic", "need size >= 16 and at least one object"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut boxes: Vec<BoxObject> = Vec::new();
        let mut tries = 0;
        while boxes.len() < cfg.objects_per_image {
            tries += 1;
            if tries > 1000 {
                return Err(Error::Invalid(format!(
                    "cannot place {} separated boxes in a {}px image",
                    cfg.objects_per_image, cfg.size
                )));
            }
            let mut b = random_box(cfg.size as f64, &mut rng);
            if cfg.objects_per_image > 1 {
                b.cx = rng.random_range(0.2..0.8) * cfg.size as f64;
                b.cy = rng.random_range(0.2..0.8) * cfg.size as f64;
            }
            if boxes.iter().all(|o| separated(o, &b)) {
                boxes.push(b);
            }
        }
        let noise_seed = rng.random();
        samples.push(render_boxes(cfg.size, &boxes, noise_seed, &format!("syn{i:04}"))?);
    }
    Ok(Dataset {
        samples,
        provenance: Provenance::Synthetic,
    })
}

