//! Turning a `Sample` into a network input and its training target.
//!
//! All geometry goes through one similarity transform: a crop centred at
//! `center` (source pixels), rotated by a quarter-turn multiple and scaled by
//! `1 / zoom`. Rectangles follow the same transform, so labels stay exact.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_valid_depth, DepthImage, Sample};
use crate::codec::{encode_labels, GraspRectangle};
use crate::error::{Error, Result};
use crate::model::GraspMaps;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    D,
    Rgb,
    Rgbd,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::D => 1,
            Channels::Rgb => 3,
            Channels::Rgbd => 4,
        }
    }

    pub fn uses_depth(self) -> bool {
        self != Channels::Rgb
    }

    pub fn uses_rgb(self) -> bool {
        self != Channels::D
    }
}

impl fmt::Display for Channels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channels::D => "d",
            Channels::Rgb => "rgb",
            Channels::Rgbd => "rgbd",
        })
    }
}

impl FromStr for Channels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d" => Ok(Channels::D),
            "rgb" => Ok(Channels::Rgb),
            "rgbd" => Ok(Channels::Rgbd),
            _ => Err(Error::config("channels", format!("expected d, rgb or rgbd, got {s:?}"))),
        }
    }
}

/// Random augmentation ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    /// Rotate by a random multiple of a quarter turn.
    pub rotate: bool,
    /// Crop window side as a fraction of the output size.
    pub zoom: (f64, f64),
    /// Place the crop window uniformly inside the image instead of centring.
    pub random_crop: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            rotate: true,
            zoom: (0.8, 1.0),
            random_crop: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrepConfig {
    pub channels: Channels,
    /// Side of the square output crop.
    pub size: usize,
    pub augment: Option<Augment>,
}

impl PrepConfig {
    pub fn new(channels: Channels, size: usize) -> Self {
        PrepConfig {
            channels,
            size,
            augment: None,
        }
    }
}

/// Source-to-crop mapping `p' = R(quarter_turns·π/2)(p - center)/zoom + size/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub zoom: f64,
    pub center: (f64, f64),
}

impl Transform {
    /// Plain centre crop of a `width × height` image.
    pub fn centered(width: usize, height: usize, size: usize) -> Self {
        let ox = (width as i64 - size as i64).div_euclid(2) as f64;
        let oy = (height as i64 - size as i64).div_euclid(2) as f64;
        let half = size as f64 / 2.0;
        Transform {
            quarter_turns: 0,
            zoom: 1.0,
            center: (ox + half, oy + half),
        }
    }

    fn cos_sin(&self) -> (f64, f64) {
        match self.quarter_turns % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    }

    pub fn angle(&self) -> f64 {
        (self.quarter_turns % 4) as f64 * FRAC_PI_2
    }

    pub fn map_point(&self, p: (f64, f64), size: usize) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        let (dx, dy) = (p.0 - self.center.0, p.1 - self.center.1);
        let half = size as f64 / 2.0;
        (
            (c * dx - s * dy) / self.zoom + half,
            (s * dx + c * dy) / self.zoom + half,
        )
    }

    /// Crop pixel to source position.
    pub fn unmap_point(&self, p: (f64, f64), size: usize) -> (f64, f64) {
        let (c, s) = self.cos_sin();
        let half = size as f64 / 2.0;
        let (dx, dy) = ((p.0 - half) * self.zoom, (p.1 - half) * self.zoom);
        (self.center.0 + c * dx + s * dy, self.center.1 - s * dx + c * dy)
    }

    pub fn map_rect(&self, r: &GraspRectangle, size: usize) -> GraspRectangle {
        let (x, y) = self.map_point((r.x, r.y), size);
        GraspRectangle::new(x, y, r.theta + self.angle(), r.width / self.zoom, r.z)
    }
}

/// Network input, rasterized target and the rectangles in crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `(1, C, size, size)`; channel order depth, then r, g, b.
    pub input: Tensor<f32>,
    pub target: GraspMaps,
    pub rects: Vec<GraspRectangle>,
}

/// Fill missing depth values from the nearest valid pixel (breadth-first,
/// 4-connected). An image without any valid pixel becomes all zeros.
pub fn inpaint_depth(img: &DepthImage) -> DepthImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    let mut done: Vec<bool> = img.data.iter().map(|v| is_valid_depth(*v)).collect();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| done[i]).collect();
    if queue.is_empty() {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !done[j] {
                done[j] = true;
                out.data[j] = out.data[i];
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    out
}

/// Zero mean, unit variance; a constant image maps to zeros.
pub fn standardize(values: &mut [f32]) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = values.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std < 1e-6 {
            0.0
        } else {
            ((*v as f64 - mean) / std) as f32
        };
    }
}

/// Bilinear lookup with edge replication.
fn bilinear(width: usize, height: usize, x: f64, y: f64, get: impl Fn(usize, usize) -> f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = get(x0, y0) * (1.0 - fx) + get(x1, y0) * fx;
    let bottom = get(x0, y1) * (1.0 - fx) + get(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Apply a fixed transform.
pub fn apply_transform(sample: &Sample, cfg: &PrepConfig, t: &Transform) -> Result<Prepared> {
    let s = cfg.size;
    if s == 0 {
        return Err(Error::config("input_size", "must be positive"));
    }
    let (w, h) = sample.size();
    let mut planes: Vec<Vec<f32>> = Vec::new();
    let coords: Vec<(f64, f64)> = (0..s * s)
        .map(|i| t.unmap_point(((i % s) as f64, (i / s) as f64), s))
        .collect();
    if cfg.channels.uses_depth() {
        let depth = sample
            .depth
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{}: channels {} need depth", sample.source, cfg.channels)))?;
        let filled = inpaint_depth(depth);
        let mut plane: Vec<f32> = coords
            .iter()
            .map(|&(x, y)| bilinear(w, h, x, y, |a, b| filled.at(a, b) as f64) as f32)
            .collect();
        standardize(&mut plane);
        planes.push(plane);
    }
    if cfg.channels.uses_rgb() {
        let rgb = sample
            .rgb
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{}: channels {} need rgb", sample.source, cfg.channels)))?;
        for c in 0..3 {
            planes.push(
                coords
                    .iter()
                    .map(|&(x, y)| {
                        let v = bilinear(w, h, x, y, |a, b| rgb.get_pixel(a as u32, b as u32)[c] as f64);
                        (v / 127.5 - 1.0) as f32
                    })
                    .collect(),
            );
        }
    }
    let rects: Vec<GraspRectangle> = sample
        .rects
        .iter()
        .map(|r| t.map_rect(r, s))
        .filter(|r| r.x >= 0.0 && r.y >= 0.0 && r.x < s as f64 && r.y < s as f64)
        .collect();
    let target = encode_labels(&rects, s, s);
    let input = Tensor::new(Shape::new(1, planes.len(), s, s), planes.concat())?;
    Ok(Prepared { input, target, rects })
}

/// Draw a random transform for `sample`.
pub fn random_transform(aug: &Augment, width: usize, height: usize, size: usize, rng: &mut ChaCha8Rng) -> Transform {
    let (lo, hi) = aug.zoom;
    let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let quarter_turns = if aug.rotate { rng.random_range(0..4u8) } else { 0 };
    let mut t = Transform::centered(width, height, size);
    t.zoom = zoom;
    t.quarter_turns = quarter_turns;
    if aug.random_crop {
        let half = zoom * size as f64 / 2.0;
        let pick = |extent: usize, fallback: f64, rng: &mut ChaCha8Rng| {
            let (a, b) = (half, extent as f64 - half);
            if b > a {
                rng.random_range(a..=b)
            } else {
                fallback
            }
        };
        t.center = (pick(width, t.center.0, rng), pick(height, t.center.1, rng));
    }
    t
}

/// Preprocess with an optional seeded augmentation. An augmented crop that
/// loses every rectangle is redrawn up to ten times before falling back to
/// the plain centre crop.
pub fn preprocess(sample: &Sample, cfg: &PrepConfig, seed: u64) -> Result<Prepared> {
    let (w, h) = sample.size();
    if w == 0 || h == 0 {
        return Err(Error::Invalid(format!("{}: empty image", sample.source)));
    }
    if let Some(aug) = &cfg.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let t = random_transform(aug, w, h, cfg.size, &mut rng);
            let p = apply_transform(sample, cfg, &t)?;
            if !p.rects.is_empty() || sample.rects.is_empty() {
                return Ok(p);
            }
        }
    }
    apply_transform(sample, cfg, &Transform::centered(w, h, cfg.size))
}
