//! Top-down tabletop simulator for closed-loop grasp planning.
//!
//! World coordinates are millimetres with the table at `z = 0`. The image
//! axes are aligned with the world axes (column ↔ x, row ↔ y), so grasp
//! angles carry over between image and world unchanged.

mod planner;

pub use planner::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DepthImage;
use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Footprint families for generated scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    Disc,
    Mixed,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "box" => Ok(ShapeFamily::Box),
            "disc" => Ok(ShapeFamily::Disc),
            "mixed" => Ok(ShapeFamily::Mixed),
            _ => Err(Error::config("shape", format!("unknown shape family `{s}`"))),
        }
    }
}

/// An extruded convex prism standing on the table.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub id: usize,
    /// Counter-clockwise (in a y-down frame: clockwise on screen) convex polygon.
    pub footprint: Vec<Point>,
    /// Top height above the table.
    pub height: f64,
}

impl SceneObject {
    pub fn contains(&self, p: Point) -> bool {
        point_in_convex(&self.footprint, p)
    }

    pub fn centroid(&self) -> Point {
        polygon_centroid(&self.footprint)
    }
}

/// Axis-aligned workspace rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn contains(&self, p: Point) -> bool {
        p.0 >= self.x0 && p.0 <= self.x1 && p.1 >= self.y0 && p.1 <= self.y1
    }

    pub fn center(&self) -> Point {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub bounds: Bounds,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>, bounds: Bounds) -> Result<Self> {
        for o in &objects {
            if o.footprint.len() < 3 {
                return Err(Error::Invalid(format!("object {} has a degenerate footprint", o.id)));
            }
            if !(o.height > 0.0) {
                return Err(Error::Invalid(format!("object {} has height {}", o.id, o.height)));
            }
            if !o.footprint.iter().all(|p| bounds.contains(*p)) {
                return Err(Error::Invalid(format!("object {} leaves the workspace", o.id)));
            }
        }
        Ok(Scene { objects, bounds })
    }

    pub fn max_height(&self) -> f64 {
        self.objects.iter().map(|o| o.height).fold(0.0, f64::max)
    }

    /// The object containing `p`, or else the one whose footprint is nearest.
    pub fn object_at(&self, p: Point) -> Option<usize> {
        if let Some(i) = self.objects.iter().position(|o| o.contains(p)) {
            return Some(i);
        }
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, point_polygon_distance(p, &o.footprint)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// What to generate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePlan {
    pub count: usize,
    pub family: ShapeFamily,
    /// 0 packs objects with 0.5–2 mm gaps; a level `n ≥ 1` keeps every pair
    /// at least `n · 20` mm apart.
    pub adjacency: u32,
    pub seed: u64,
}

impl Default for ScenePlan {
    fn default() -> Self {
        ScenePlan {
            count: 1,
            family: ShapeFamily::Box,
            adjacency: 1,
            seed: 0,
        }
    }
}

/// Workspace used by [`make_scene`].
pub const WORKSPACE: Bounds = Bounds {
    x0: -200.0,
    y0: -200.0,
    x1: 200.0,
    y1: 200.0,
};

const ADJACENT_GAP: (f64, f64) = (0.5, 2.0);
const LEVEL_GAP_MM: f64 = 20.0;
const PLACEMENT_TRIES: usize = 200;

fn rotate(p: Point, a: f64) -> Point {
    let (s, c) = a.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

fn random_shape(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let disc = match family {
        ShapeFamily::Box => false,
        ShapeFamily::Disc => true,
        ShapeFamily::Mixed => rng.random_bool(0.5),
    };
    if disc {
        let r = rng.random_range(15.0..30.0);
        (0..16)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 16.0;
                (r * a.cos(), r * a.sin())
            })
            .collect()
    } else {
        let (l, b) = (rng.random_range(40.0..80.0), rng.random_range(20.0..40.0));
        let a = rng.random_range(0.0..std::f64::consts::PI);
        [(-l / 2.0, -b / 2.0), (l / 2.0, -b / 2.0), (l / 2.0, b / 2.0), (-l / 2.0, b / 2.0)]
            .into_iter()
            .map(|p| rotate(p, a))
            .collect()
    }
}

fn translate(shape: &[Point], t: Point) -> Vec<Point> {
    shape.iter().map(|p| (p.0 + t.0, p.1 + t.1)).collect()
}

fn fits(fp: &[Point], bounds: &Bounds, others: &[SceneObject], min_gap: f64) -> bool {
    fp.iter().all(|p| bounds.contains(*p))
        && others
            .iter()
            .all(|o| !convex_overlap(fp, &o.footprint) && polygon_distance(fp, &o.footprint) >= min_gap)
}

/// Generate a deterministic scene. A single object is placed at the
/// workspace centre.
pub fn make_scene(plan: &ScenePlan) -> Result<Scene> {
    if plan.count == 0 {
        return Err(Error::config("count", "a scene needs at least one object"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let bounds = WORKSPACE;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(plan.count);
    for id in 0..plan.count {
        let shape = random_shape(plan.family, &mut rng);
        let height = rng.random_range(30.0..80.0);
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let fp = if id == 0 {
                let c = bounds.center();
                let jitter = if plan.count == 1 { 0.0 } else { 40.0 };
                let t = (
                    c.0 + rng.random_range(-1.0..=1.0) * jitter,
                    c.1 + rng.random_range(-1.0..=1.0) * jitter,
                );
                translate(&shape, t)
            } else if plan.adjacency == 0 {
                let anchor = &objects[rng.random_range(0..objects.len())];
                let gap = rng.random_range(ADJACENT_GAP.0..ADJACENT_GAP.1);
                match slide_to_gap(&shape, anchor, rng.random_range(0.0..std::f64::consts::TAU), gap) {
                    Some(fp) => fp,
                    None => continue,
                }
            } else {
                let t = (
                    rng.random_range(bounds.x0..bounds.x1),
                    rng.random_range(bounds.y0..bounds.y1),
                );
                translate(&shape, t)
            };
            let min_gap = if plan.adjacency == 0 {
                ADJACENT_GAP.0 * 0.999
            } else {
                plan.adjacency as f64 * LEVEL_GAP_MM
            };
            if fits(&fp, &bounds, &objects, min_gap) {
                placed = Some(fp);
                break;
            }
        }
        let footprint = placed.ok_or_else(|| {
            Error::Invalid(format!(
                "could not place object {} of {} after {PLACEMENT_TRIES} tries",
                id + 1,
                plan.count
            ))
        })?;
        objects.push(SceneObject { id, footprint, height });
    }
    Scene::new(objects, bounds)
}

/// Place `shape` along direction `phi` from `anchor`'s centroid at the
/// distance where the footprint gap equals `gap`.
fn slide_to_gap(shape: &[Point], anchor: &SceneObject, phi: f64, gap: f64) -> Option<Vec<Point>> {
    let c = anchor.centroid();
    let dir = (phi.cos(), phi.sin());
    let at = |t: f64| translate(shape, (c.0 + dir.0 * t, c.1 + dir.1 * t));
    let sep = |t: f64| {
        let fp = at(t);
        if convex_overlap(&fp, &anchor.footprint) {
            -1.0
        } else {
            polygon_distance(&fp, &anchor.footprint)
        }
    };
    let (mut lo, mut hi) = (0.0, 200.0);
    if sep(hi) < gap {
        return None;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if sep(mid) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let fp = at(hi);
    let d = sep(hi);
    (d >= ADJACENT_GAP.0 * 0.999 && d <= ADJACENT_GAP.1).then_some(fp)
}

/// Overhead pinhole camera with a fixed focal constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Focal length in pixels: a pixel spans `z / focal_px` mm at the table.
    pub focal_px: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            image_size: 96,
            focal_px: 120.0,
        }
    }
}

/// Camera position, looking straight down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Camera {
    pub fn mm_per_px(&self, z: f64) -> f64 {
        z / self.focal_px
    }

    /// World point seen at pixel coordinate `(u, v)` (column, row).
    pub fn pixel_to_world(&self, view: &Viewpoint, u: f64, v: f64) -> Point {
        let half = self.image_size as f64 / 2.0;
        let s = self.mm_per_px(view.z);
        (view.x + (u - half) * s, view.y + (v - half) * s)
    }

    pub fn world_to_pixel(&self, view: &Viewpoint, p: Point) -> (f64, f64) {
        let half = self.image_size as f64 / 2.0;
        let s = self.mm_per_px(view.z);
        ((p.0 - view.x) / s + half, (p.1 - view.y) / s + half)
    }
}

/// Render the depth (distance below the camera, mm) seen from `view`.
/// Footprints are projected with the table-plane scale and the tallest
/// object wins where projections overlap.
pub fn render_depth(scene: &Scene, camera: &Camera, view: &Viewpoint) -> Result<DepthImage> {
    let top = scene.max_height();
    if !(view.z > top) {
        return Err(Error::Invalid(format!(
            "camera at z = {} is not above the tallest object ({top} mm)",
            view.z
        )));
    }
    let n = camera.image_size;
    let mut data = vec![view.z as f32; n * n];
    for row in 0..n {
        for col in 0..n {
            let p = camera.pixel_to_world(view, col as f64, row as f64);
            let h = scene
                .objects
                .iter()
                .filter(|o| o.contains(p))
                .map(|o| o.height)
                .fold(0.0, f64::max);
            data[row * n + col] = (view.z - h) as f32;
        }
    }
    DepthImage::new(n, n, data)
}

// ---- planar geometry -------------------------------------------------------

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Inside or on the boundary of a convex polygon of either orientation.
pub fn point_in_convex(poly: &[Point], p: Point) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let c = cross(poly[i], poly[(i + 1) % poly.len()], p);
        if c != 0.0 {
            if sign != 0.0 && c.signum() != sign {
                return false;
            }
            sign = c.signum();
        }
    }
    true
}

pub fn polygon_centroid(poly: &[Point]) -> Point {
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let c = p.0 * q.1 - q.0 * p.1;
        a += c;
        cx += (p.0 + q.0) * c;
        cy += (p.1 + q.1) * c;
    }
    (cx / (3.0 * a), cy / (3.0 * a))
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Distance from `p` to the polygon boundary; zero inside.
pub fn point_polygon_distance(p: Point, poly: &[Point]) -> f64 {
    if point_in_convex(poly, p) {
        return 0.0;
    }
    (0..poly.len())
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % poly.len()]))
        .fold(f64::INFINITY, f64::min)
}

/// Proper or touching intersection of two segments.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point, q: Point, r: Point| {
        cross(p, q, r) == 0.0
            && r.0 >= p.0.min(q.0)
            && r.0 <= p.0.max(q.0)
            && r.1 >= p.1.min(q.1)
            && r.1 <= p.1.max(q.1)
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// Whether segment `ab` touches the convex polygon.
pub fn segment_hits_polygon(a: Point, b: Point, poly: &[Point]) -> bool {
    point_in_convex(poly, a)
        || point_in_convex(poly, b)
        || (0..poly.len()).any(|i| segments_intersect(a, b, poly[i], poly[(i + 1) % poly.len()]))
}

pub fn convex_overlap(p: &[Point], q: &[Point]) -> bool {
    p.iter().any(|v| point_in_convex(q, *v))
        || q.iter().any(|v| point_in_convex(p, *v))
        || (0..p.len()).any(|i| segment_hits_polygon(p[i], p[(i + 1) % p.len()], q))
}

/// Gap between two disjoint convex polygons (zero if they touch or overlap).
pub fn polygon_distance(p: &[Point], q: &[Point]) -> f64 {
    if convex_overlap(p, q) {
        return 0.0;
    }
    let one = |a: &[Point], b: &[Point]| {
        a.iter()
            .flat_map(|v| (0..b.len()).map(move |i| point_segment_distance(*v, b[i], b[(i + 1) % b.len()])))
            .fold(f64::INFINITY, f64::min)
    };
    one(p, q).min(one(q, p))
}

/// Width of a convex polygon measured along unit direction `n`.
pub fn extent_along(poly: &[Point], n: Point) -> f64 {
    let proj = poly.iter().map(|p| p.0 * n.0 + p.1 * n.1);
    let (lo, hi) = proj.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}
