//! Conversion between grasp rectangles and per-pixel grasp maps.
//!
//! Geometry convention (image coordinates, x right, y down): `theta` is the
//! direction of the jaw plates, the jaws close along the normal
//! `(-sin θ, cos θ)`, and `width` is the opening measured along that normal.
//! The plates themselves are `JAW_ASPECT * width` long. Because a parallel
//! gripper is unchanged by a half turn, angles live in `[-π/2, π/2)` and are
//! stored in the maps as `(sin 2θ, cos 2θ)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::GraspMaps;

/// Largest representable jaw opening in pixels; the width map stores
/// `width / MAX_WIDTH_PX`.
pub const MAX_WIDTH_PX: f64 = 150.0;

/// Plate length as a fraction of the opening.
pub const JAW_ASPECT: f64 = 0.5;

/// Fold an angle into `[-π/2, π/2)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can round up to exactly PI
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

/// Distance between two grasp angles modulo π, in `[0, π/2]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// One executable grasp `(x, y, θ, w, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspRectangle {
    pub x: f64,
    pub y: f64,
    /// Plate direction in `[-π/2, π/2)`.
    pub theta: f64,
    /// Jaw opening in pixels, `[0, MAX_WIDTH_PX]`.
    pub width: f64,
    /// Height or depth value, carried through unclamped.
    pub z: f64,
}

impl GraspRectangle {
    /// Normalizes the angle and clamps the width into range.
    pub fn new(x: f64, y: f64, theta: f64, width: f64, z: f64) -> Self {
        GraspRectangle {
            x,
            y,
            theta: normalize_angle(theta),
            width: width.clamp(0.0, MAX_WIDTH_PX),
            z,
        }
    }

    /// Unit vector along the plates.
    pub fn plate_dir(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// Unit vector along which the jaws close.
    pub fn normal(&self) -> (f64, f64) {
        (-self.theta.sin(), self.theta.cos())
    }

    /// Corners of the oriented rectangle spanned by the jaws, in
    /// counter-clockwise order (for y-down coordinates: clockwise on screen).
    pub fn corners(&self, aspect: f64) -> [(f64, f64); 4] {
        let (dx, dy) = self.plate_dir();
        let (nx, ny) = self.normal();
        let a = 0.5 * aspect * self.width;
        let b = 0.5 * self.width;
        [
            (self.x - a * dx - b * nx, self.y - a * dy - b * ny),
            (self.x + a * dx - b * nx, self.y + a * dy - b * ny),
            (self.x + a * dx + b * nx, self.y + a * dy + b * ny),
            (self.x - a * dx + b * nx, self.y - a * dy + b * ny),
        ]
    }
}

/// `(sin 2θ, cos 2θ)`.
pub fn angle_encode(theta: f64) -> (f64, f64) {
    ((2.0 * theta).sin(), (2.0 * theta).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedAngle {
    pub theta: f64,
    /// Set when `(sin, cos)` is too close to the origin to carry an angle.
    pub degenerate: bool,
}

pub fn angle_decode(sin2: f64, cos2: f64) -> DecodedAngle {
    if sin2.hypot(cos2) < 1e-9 {
        return DecodedAngle {
            theta: 0.0,
            degenerate: true,
        };
    }
    DecodedAngle {
        theta: normalize_angle(0.5 * sin2.atan2(cos2)),
        degenerate: false,
    }
}

/// Pixels painted for one rectangle: the full plate length and the centre
/// third of the opening, sampled at integer pixel centres. Returned as
/// row-major indices in ascending order, clipped to the image.
pub fn painted_pixels(rect: &GraspRectangle, height: usize, width: usize) -> Vec<usize> {
    let half_plate = 0.5 * JAW_ASPECT * rect.width;
    let half_open = rect.width / 6.0;
    let (dx, dy) = rect.plate_dir();
    let reach = half_plate.hypot(half_open) + 1.0;
    let y0 = (rect.y - reach).floor().max(0.0) as usize;
    let x0 = (rect.x - reach).floor().max(0.0) as usize;
    let y1 = ((rect.y + reach).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
    let x1 = ((rect.x + reach).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
    let mut out = Vec::new();
    for py in y0..y1 {
        for px in x0..x1 {
            let (rx, ry) = (px as f64 - rect.x, py as f64 - rect.y);
            let u = rx * dx + ry * dy;
            let v = -rx * dy + ry * dx;
            if u.abs() <= half_plate && v.abs() <= half_open {
                out.push(py * width + px);
            }
        }
    }
    out
}

/// Rasterize ground-truth rectangles into training targets.
///
/// Quality is 1 on every painted pixel. Angle and width are written only on
/// pixels that no earlier rectangle painted; everything else stays 0.
pub fn encode_labels(rects: &[GraspRectangle], height: usize, width: usize) -> GraspMaps {
    let mut maps = GraspMaps::zeros(height, width);
    for r in rects {
        let (s, c) = angle_encode(r.theta);
        let wn = (r.width / MAX_WIDTH_PX).min(1.0) as f32;
        for i in painted_pixels(r, height, width) {
            if maps.quality[i] == 1.0 {
                continue;
            }
            maps.quality[i] = 1.0;
            maps.sin2[i] = s as f32;
            maps.cos2[i] = c as f32;
            maps.width_norm[i] = wn;
        }
    }
    maps
}

/// Peak-extraction parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Maximum number of grasps returned.
    pub k: usize,
    /// Gaussian smoothing of the quality map, pixels; 0 disables it.
    pub sigma: f64,
    /// Smoothed quality below this is never a grasp.
    pub q_min: f64,
    /// Minimum distance between returned grasp centres, pixels.
    pub nms_radius: f64,
    /// A peak extends over the connected pixels whose smoothed quality is at
    /// least this fraction of the peak value.
    pub peak_fraction: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: 1,
            sigma: 2.0,
            q_min: 0.2,
            nms_radius: 10.0,
            peak_fraction: 0.95,
        }
    }
}

/// A decoded grasp and its (smoothed) quality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub rect: GraspRectangle,
    pub quality: f64,
}

impl fmt::Display for Detection {
    /// `x y theta w z q`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.rect;
        write!(
            f,
            "{:.3} {:.3} {:.6} {:.3} {:.3} {:.6}",
            r.x, r.y, r.theta, r.width, r.z, self.quality
        )
    }
}

impl FromStr for Detection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Invalid(format!("grasp line {s:?}: expected 6 numbers")))?;
        if v.len() != 6 {
            return Err(Error::Invalid(format!("grasp line {s:?}: expected 6 numbers")));
        }
        Ok(Detection {
            rect: GraspRectangle::new(v[0], v[1], v[2], v[3], v[4]),
            quality: v[5],
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// `G∗(Q·m) / G∗(Q)` at pixel `at` for the sin, cos and width maps, with the
/// Gaussian of width `sigma` and edge replication. Inside a single painted
/// label this is exactly the label value; on network output it averages
/// per-pixel noise around the peak. Falls back to the raw pixel when the
/// weights vanish.
fn quality_weighted(maps: &GraspMaps, at: usize, sigma: f64) -> [f64; 3] {
    let raw = [maps.sin2[at] as f64, maps.cos2[at] as f64, maps.width_norm[at] as f64];
    if sigma <= 0.0 {
        return raw;
    }
    let (h, w) = (maps.height as isize, maps.width as isize);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (y, x) = (at as isize / w, at as isize % w);
    let (mut den, mut num) = (0.0, [0.0; 3]);
    for dy in -r..=r {
        let yy = (y + dy).clamp(0, h - 1);
        for dx in -r..=r {
            let xx = (x + dx).clamp(0, w - 1);
            let i = (yy * w + xx) as usize;
            let g = k[(dy + r) as usize] * k[(dx + r) as usize] * maps.quality[i] as f64;
            den += g;
            num[0] += g * maps.sin2[i] as f64;
            num[1] += g * maps.cos2[i] as f64;
            num[2] += g * maps.width_norm[i] as f64;
        }
    }
    if den <= 0.0 {
        return raw;
    }
    num.map(|v| v / den)
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_smooth(data: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let src: Vec<f64> = data.iter().map(|v| *v as f64).collect();
    if sigma <= 0.0 {
        return src;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * src[y * width + clamp(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clamp(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Extract up to `k` grasps from the maps.
///
/// The quality map is smoothed, local maxima at or above `q_min` are visited
/// in descending quality (ties by lowest row-major index) and accepted when
/// at least `nms_radius` from every accepted grasp. Each peak is located at
/// the centroid of its connected region above `peak_fraction` of the peak
/// value; angle and width are quality-weighted Gaussian averages taken at
/// the region pixel nearest the centroid.
pub fn decode_grasps(maps: &GraspMaps, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    if cfg.k == 0 {
        return Err(Error::Invalid("decode: k must be at least 1".into()));
    }
    let (h, w) = (maps.height, maps.width);
    if maps.quality.len() != h * w {
        return Err(Error::shape("decode", "quality map size disagrees with dimensions"));
    }
    let s = gaussian_smooth(&maps.quality, h, w, cfg.sigma);
    let neighbors = |i: usize| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| dy != 0 || dx != 0)
            .map(move |(dy, dx)| (y + dy, x + dx))
            .filter(move |&(yy, xx)| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize)
            .map(move |(yy, xx)| yy as usize * w + xx as usize)
    };
    let mut candidates: Vec<usize> = (0..h * w)
        .filter(|&i| s[i] >= cfg.q_min && neighbors(i).all(|j| s[j] <= s[i]))
        .collect();
    candidates.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let mut claimed = vec![false; h * w];
    let mut out: Vec<Detection> = Vec::new();
    for seed in candidates {
        if out.len() == cfg.k {
            break;
        }
        if claimed[seed] {
            continue;
        }
        let level = s[seed];
        let floor = level * cfg.peak_fraction;
        let mut plateau = vec![seed];
        claimed[seed] = true;
        let mut head = 0;
        while head < plateau.len() {
            let i = plateau[head];
            head += 1;
            for j in neighbors(i) {
                if !claimed[j] && s[j] >= floor {
                    claimed[j] = true;
                    plateau.push(j);
                }
            }
        }
        let n = plateau.len() as f64;
        let cx = plateau.iter().map(|i| (i % w) as f64).sum::<f64>() / n;
        let cy = plateau.iter().map(|i| (i / w) as f64).sum::<f64>() / n;
        if out
            .iter()
            .any(|d| (d.rect.x - cx).hypot(d.rect.y - cy) < cfg.nms_radius)
        {
            continue;
        }
        let at = *plateau
            .iter()
            .min_by(|&&a, &&b| {
                let da = ((a % w) as f64 - cx).hypot((a / w) as f64 - cy);
                let db = ((b % w) as f64 - cx).hypot((b / w) as f64 - cy);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("peak region holds its seed");
        let [sin2, cos2, wn] = quality_weighted(maps, at, cfg.sigma);
        let angle = angle_decode(sin2, cos2);
        out.push(Detection {
            rect: GraspRectangle::new(cx, cy, angle.theta, MAX_WIDTH_PX * wn.clamp(0.0, 1.0), 0.0),
            quality: level,
        });
    }
    Ok(out)
}

/// Shannon entropy (nats) of the quality map normalized to a distribution.
/// An all-zero map is treated as uniform.
///
/// Values are accumulated in sorted order, so the result depends only on the
/// multiset of values and not on where they sit in the image.
pub fn q_entropy(q: &[f32]) -> Result<f64> {
    if let Some(v) = q.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid(format!(
            "entropy needs a non-negative quality map, found {v}"
        )));
    }
    let mut vals: Vec<f32> = q.iter().copied().filter(|v| *v > 0.0).collect();
    if vals.is_empty() {
        return Ok((q.len() as f64).ln());
    }
    vals.sort_by(f32::total_cmp);
    let total: f64 = vals.iter().map(|v| *v as f64).sum();
    Ok(-vals
        .iter()
        .map(|v| *v as f64 / total)
        .map(|p| p * p.ln())
        .sum::<f64>())
}
