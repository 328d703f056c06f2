//! Perception models for the simulator, the entropy-steered descent and the
//! grasp outcome check.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{render_depth, segment_hits_polygon, Camera, Point, Scene, SceneObject, Viewpoint};
use crate::codec::{decode_grasps, encode_labels, q_entropy, DecodeConfig, Detection, GraspRectangle, JAW_ASPECT};
use crate::data::{preprocess, Channels, DepthImage, PrepConfig, Sample};
use crate::error::{Error, Result};
use crate::eval::GraspPredictor;
use crate::model::GraspMaps;

/// Anything that turns a rendered view into grasp maps.
///
/// Oracles may look at the scene directly; learned models use only `depth`.
pub trait ViewModel {
    fn predict_view(&mut self, scene: &Scene, camera: &Camera, view: &Viewpoint, depth: &DepthImage)
        -> Result<GraspMaps>;
}

/// Adapter running a [`GraspPredictor`] on the rendered depth image. The
/// predictor must accept depth-only input at the camera's image size.
pub struct NetworkModel<'a> {
    pub predictor: &'a mut dyn GraspPredictor,
}

impl ViewModel for NetworkModel<'_> {
    fn predict_view(&mut self, _: &Scene, camera: &Camera, _: &Viewpoint, depth: &DepthImage) -> Result<GraspMaps> {
        let sample = Sample::new(None, Some(depth.clone()), Vec::new(), "sim", "sim")?;
        let prepared = preprocess(&sample, &PrepConfig::new(Channels::D, camera.image_size), 0)?;
        self.predictor.predict(&prepared)
    }
}

/// Candidate grasps on `obj`, narrowest first: one per distinct edge
/// direction, through the footprint centroid, closing along the edge normal
/// and opened `margin` mm wider than the object's extent.
pub fn candidate_grasps(obj: &SceneObject, margin: f64) -> Vec<GraspRectangle> {
    let fp = &obj.footprint;
    let c = obj.centroid();
    let mut out: Vec<GraspRectangle> = Vec::new();
    for i in 0..fp.len() {
        let (a, b) = (fp[i], fp[(i + 1) % fp.len()]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len == 0.0 {
            continue;
        }
        let n = (-(b.1 - a.1) / len, (b.0 - a.0) / len);
        let g = GraspRectangle::new(c.0, c.1, (b.1 - a.1).atan2(b.0 - a.0), super::extent_along(fp, n) + margin, obj.height);
        if !out.iter().any(|o| crate::codec::angle_distance(o.theta, g.theta) < 1e-6) {
            out.push(g);
        }
    }
    out.sort_by(|p, q| p.width.total_cmp(&q.width));
    out
}

/// The grasp a perfect planner would pick on object `index`: the narrowest
/// candidate that passes [`check_grasp`], or the narrowest candidate if none
/// does.
pub fn object_grasp(scene: &Scene, index: usize, margin: f64) -> Result<GraspRectangle> {
    let cands = candidate_grasps(&scene.objects[index], margin);
    for g in &cands {
        if check_grasp(scene, g)?.success {
            return Ok(*g);
        }
    }
    cands
        .first()
        .copied()
        .ok_or_else(|| Error::Invalid(format!("object {index} has no grasp candidates")))
}

/// Ground-truth perception: each object contributes its [`object_grasp`].
/// Q is a fixed-size peak (in pixels) at every grasp
/// centre; angle and width are painted over the usual label region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthOracle {
    pub margin: f64,
    pub peak_sigma_px: f64,
    pub peak_radius_px: i64,
}

impl Default for GroundTruthOracle {
    fn default() -> Self {
        GroundTruthOracle {
            margin: 10.0,
            peak_sigma_px: 1.5,
            peak_radius_px: 3,
        }
    }
}

impl GroundTruthOracle {
    /// Render maps for grasps given in pixel units. Centres are snapped to
    /// the nearest pixel; grasps whose centre is off-image are skipped.
    pub fn paint(&self, grasps: &[GraspRectangle], size: usize) -> GraspMaps {
        let snapped: Vec<GraspRectangle> = grasps
            .iter()
            .map(|g| GraspRectangle { x: g.x.round(), y: g.y.round(), ..*g })
            .filter(|g| g.x >= 0.0 && g.y >= 0.0 && g.x < size as f64 && g.y < size as f64)
            .collect();
        let mut maps = encode_labels(&snapped, size, size);
        maps.quality.iter_mut().for_each(|q| *q = 0.0);
        let r = self.peak_radius_px;
        for g in &snapped {
            let (cx, cy) = (g.x as i64, g.y as i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dx * dx + dy * dy) as f64;
                    let (x, y) = (cx + dx, cy + dy);
                    if d2 > (r * r) as f64 || x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                        continue;
                    }
                    let v = (-d2 / (2.0 * self.peak_sigma_px.powi(2))).exp() as f32;
                    let i = y as usize * size + x as usize;
                    maps.quality[i] = maps.quality[i].max(v);
                }
            }
        }
        maps
    }

    fn pixel_grasps(&self, scene: &Scene, camera: &Camera, view: &Viewpoint) -> Result<Vec<(usize, GraspRectangle)>> {
        let s = camera.mm_per_px(view.z);
        (0..scene.objects.len())
            .map(|i| {
                let g = object_grasp(scene, i, self.margin)?;
                let (u, v) = camera.world_to_pixel(view, (g.x, g.y));
                Ok((scene.objects[i].id, GraspRectangle::new(u, v, g.theta, g.width / s, g.z)))
            })
            .collect()
    }
}

impl ViewModel for GroundTruthOracle {
    fn predict_view(&mut self, scene: &Scene, camera: &Camera, view: &Viewpoint, _: &DepthImage) -> Result<GraspMaps> {
        let grasps: Vec<GraspRectangle> = self.pixel_grasps(scene, camera, view)?.into_iter().map(|(_, g)| g).collect();
        Ok(self.paint(&grasps, camera.image_size))
    }
}

/// The ground-truth oracle with Gaussian errors of fixed size in pixels on
/// every grasp centre and angle, so its error in millimetres grows with
/// camera height. The noise is a deterministic function of the seed, the
/// viewpoint and the object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisyOracle {
    pub base: GroundTruthOracle,
    pub center_sigma_px: f64,
    pub angle_sigma: f64,
    pub seed: u64,
}

impl NoisyOracle {
    pub fn new(center_sigma_px: f64, angle_sigma: f64, seed: u64) -> Self {
        NoisyOracle {
            base: GroundTruthOracle::default(),
            center_sigma_px,
            angle_sigma,
            seed,
        }
    }
}

fn view_seed(seed: u64, view: &Viewpoint, id: usize) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [view.x.to_bits(), view.y.to_bits(), view.z.to_bits(), id as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

impl ViewModel for NoisyOracle {
    fn predict_view(&mut self, scene: &Scene, camera: &Camera, view: &Viewpoint, _: &DepthImage) -> Result<GraspMaps> {
        let c = Normal::new(0.0, self.center_sigma_px).map_err(|e| Error::config("center_sigma_px", e.to_string()))?;
        let a = Normal::new(0.0, self.angle_sigma).map_err(|e| Error::config("angle_sigma", e.to_string()))?;
        let grasps: Vec<GraspRectangle> = self
            .base
            .pixel_grasps(scene, camera, view)?
            .into_iter()
            .map(|(id, g)| {
                let mut rng = ChaCha8Rng::seed_from_u64(view_seed(self.seed, view, id));
                GraspRectangle::new(
                    g.x + c.sample(&mut rng),
                    g.y + c.sample(&mut rng),
                    g.theta + a.sample(&mut rng),
                    g.width,
                    g.z,
                )
            })
            .collect();
        Ok(self.base.paint(&grasps, camera.image_size))
    }
}

/// Trajectory parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub camera: Camera,
    /// Starting camera height.
    pub z_max: f64,
    /// The descent stops once the camera is within this distance of the
    /// tallest object top.
    pub clearance: f64,
    /// Height lost per step.
    pub rate: f64,
    /// Horizontal move per unit of entropy gradient (mm² per nat).
    pub gain: f64,
    /// Offset of the entropy probes.
    pub probe_delta: f64,
    /// Largest horizontal move per step.
    pub max_step: f64,
    /// Start position; `None` is the workspace centre.
    pub start: Option<Point>,
    pub decode: DecodeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            camera: Camera::default(),
            z_max: 600.0,
            clearance: 40.0,
            rate: 25.0,
            gain: 400.0,
            probe_delta: 10.0,
            max_step: 20.0,
            start: None,
            decode: DecodeConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rate", self.rate),
            ("clearance", self.clearance),
            ("probe_delta", self.probe_delta),
            ("z_max", self.z_max),
            ("focal_px", self.camera.focal_px),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.gain >= 0.0) || !(self.max_step >= 0.0) {
            return Err(Error::config("gain", "gain and max_step must be non-negative"));
        }
        if self.camera.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        Ok(())
    }
}

/// A decoded grasp converted to world millimetres.
fn to_world(camera: &Camera, view: &Viewpoint, d: &Detection) -> Detection {
    let (x, y) = camera.pixel_to_world(view, d.rect.x, d.rect.y);
    let s = camera.mm_per_px(view.z);
    Detection {
        rect: GraspRectangle {
            x,
            y,
            theta: d.rect.theta,
            width: d.rect.width * s,
            z: d.rect.z,
        },
        quality: d.quality,
    }
}

/// Render, predict, decode the top grasp (world mm) and the Q entropy.
pub fn observe(
    scene: &Scene,
    model: &mut dyn ViewModel,
    cfg: &SimConfig,
    view: &Viewpoint,
) -> Result<(Option<Detection>, f64)> {
    let depth = render_depth(scene, &cfg.camera, view)?;
    let maps = model.predict_view(scene, &cfg.camera, view, &depth)?;
    let top = decode_grasps(&maps, &DecodeConfig { k: 1, ..cfg.decode })?;
    let entropy = q_entropy(&maps.quality)?;
    Ok((top.first().map(|d| to_world(&cfg.camera, view, d)), entropy))
}

/// One planning step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Viewpoint,
    pub grasp: Option<Detection>,
    pub entropy: f64,
    /// Finite-difference entropy gradient (nats per mm).
    pub gradient: (f64, f64),
}

/// Observe from `view`, probe the entropy at `±probe_delta` in x and y,
/// move against its gradient (clamped to `max_step`, zero when nothing was
/// decoded) and descend by `rate`.
pub fn plan_step(scene: &Scene, view: &Viewpoint, model: &mut dyn ViewModel, cfg: &SimConfig) -> Result<StepOutcome> {
    let (grasp, entropy) = observe(scene, model, cfg, view)?;
    let d = cfg.probe_delta;
    let mut probe = |dx: f64, dy: f64| -> Result<f64> {
        let v = Viewpoint {
            x: view.x + dx,
            y: view.y + dy,
            z: view.z,
        };
        Ok(observe(scene, model, cfg, &v)?.1)
    };
    let gx = (probe(d, 0.0)? - probe(-d, 0.0)?) / (2.0 * d);
    let gy = (probe(0.0, d)? - probe(0.0, -d)?) / (2.0 * d);
    let (mut mx, mut my) = if grasp.is_some() {
        (-cfg.gain * gx, -cfg.gain * gy)
    } else {
        (0.0, 0.0)
    };
    let len = mx.hypot(my);
    if len > cfg.max_step {
        mx *= cfg.max_step / len;
        my *= cfg.max_step / len;
    }
    let b = scene.bounds;
    Ok(StepOutcome {
        next: Viewpoint {
            x: (view.x + mx).clamp(b.x0, b.x1),
            y: (view.y + my).clamp(b.y0, b.y1),
            z: view.z - cfg.rate,
        },
        grasp,
        entropy,
        gradient: (gx, gy),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub view: Viewpoint,
    pub grasp: Option<Detection>,
    pub entropy: f64,
}

/// Outcome of executing one grasp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspCheck {
    pub target: usize,
    pub success: bool,
    pub collision: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub collision: bool,
    pub target: Option<usize>,
    pub trace: Vec<TraceStep>,
    pub final_grasp: Option<GraspRectangle>,
}

/// The two jaw segments of `g`: centred at `±w/2` along the closing
/// direction, each `JAW_ASPECT · w` long along the plates.
pub fn jaw_segments(g: &GraspRectangle) -> [(Point, Point); 2] {
    let (n, d) = (g.normal(), g.plate_dir());
    let half = JAW_ASPECT * g.width / 2.0;
    [1.0, -1.0].map(|s| {
        let m = (g.x + s * g.width / 2.0 * n.0, g.y + s * g.width / 2.0 * n.1);
        ((m.0 - half * d.0, m.1 - half * d.1), (m.0 + half * d.0, m.1 + half * d.1))
    })
}

/// Judge a world-frame grasp. The target is the object under the centre, or
/// the nearest one. Success needs the centre on the target, both jaws clear
/// of the target, and no jaw touching any other object (a collision).
pub fn check_grasp(scene: &Scene, g: &GraspRectangle) -> Result<GraspCheck> {
    let target = scene
        .object_at((g.x, g.y))
        .ok_or_else(|| Error::Invalid("scene has no objects".into()))?;
    let jaws = jaw_segments(g);
    let hits = |o: &SceneObject| jaws.iter().any(|(a, b)| segment_hits_polygon(*a, *b, &o.footprint));
    let collision = scene.objects.iter().enumerate().any(|(i, o)| i != target && hits(o));
    let t = &scene.objects[target];
    let success = t.contains((g.x, g.y)) && !hits(t) && !collision;
    Ok(GraspCheck {
        target,
        success,
        collision,
    })
}

fn start_view(scene: &Scene, cfg: &SimConfig) -> Viewpoint {
    let (x, y) = cfg.start.unwrap_or_else(|| scene.bounds.center());
    Viewpoint { x, y, z: cfg.z_max }
}

fn finish(scene: &Scene, trace: Vec<TraceStep>) -> Result<EpisodeResult> {
    let final_grasp = trace.iter().rev().find_map(|s| s.grasp.map(|d| d.rect));
    let check = final_grasp.map(|g| check_grasp(scene, &g)).transpose()?;
    Ok(EpisodeResult {
        success: check.is_some_and(|c| c.success),
        collision: check.is_some_and(|c| c.collision),
        target: check.map(|c| c.target),
        trace,
        final_grasp,
    })
}

/// Closed-loop episode: [`plan_step`] from `z_max` until the camera is within
/// `clearance` of the tallest object. The executed grasp is the last
/// non-empty decode.
pub fn run_episode(scene: &Scene, model: &mut dyn ViewModel, cfg: &SimConfig) -> Result<EpisodeResult> {
    cfg.validate()?;
    if scene.objects.is_empty() {
        return Err(Error::Invalid("scene has no objects".into()));
    }
    let stop = scene.max_height() + cfg.clearance;
    if cfg.z_max <= stop {
        return Err(Error::config(
            "z_max",
            format!("{} is not above the stop height {stop}", cfg.z_max),
        ));
    }
    let mut view = start_view(scene, cfg);
    let mut trace = Vec::new();
    while view.z > stop {
        let step = plan_step(scene, &view, model, cfg)?;
        trace.push(TraceStep {
            view,
            grasp: step.grasp,
            entropy: step.entropy,
        });
        view = step.next;
    }
    finish(scene, trace)
}

/// Baseline policy: a single prediction from the start view.
pub fn run_single_shot(scene: &Scene, model: &mut dyn ViewModel, cfg: &SimConfig) -> Result<EpisodeResult> {
    cfg.validate()?;
    if scene.objects.is_empty() {
        return Err(Error::Invalid("scene has no objects".into()));
    }
    let view = start_view(scene, cfg);
    let (grasp, entropy) = observe(scene, model, cfg, &view)?;
    finish(scene, vec![TraceStep { view, grasp, entropy }])
}

/// Tab-separated trace: `step x y z grasp_x grasp_y theta width q entropy`,
/// with `-` for steps where nothing was decoded.
pub fn trace_table(trace: &[TraceStep]) -> String {
    let mut out = String::from("step\tx\ty\tz\tgrasp_x\tgrasp_y\ttheta\twidth\tq\tentropy\n");
    for (i, s) in trace.iter().enumerate() {
        let _ = write!(out, "{i}\t{:.3}\t{:.3}\t{:.3}\t", s.view.x, s.view.y, s.view.z);
        match &s.grasp {
            Some(d) => {
                let r = &d.rect;
                let _ = write!(out, "{:.3}\t{:.3}\t{:.6}\t{:.3}\t{:.6}", r.x, r.y, r.theta, r.width, d.quality);
            }
            None => out.push_str("-\t-\t-\t-\t-"),
        }
        let _ = writeln!(out, "\t{:.6}", s.entropy);
    }
    out
}

/// Collision and success counts of both policies over a set of scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyComparison {
    pub seeds: Vec<u64>,
    pub closed_loop_success: usize,
    pub closed_loop_collisions: usize,
    pub single_shot_success: usize,
    pub single_shot_collisions: usize,
}

impl PolicyComparison {
    pub fn episodes(&self) -> usize {
        self.seeds.len()
    }

    pub fn rate(&self, count: usize) -> f64 {
        if self.seeds.is_empty() {
            0.0
        } else {
            count as f64 / self.seeds.len() as f64
        }
    }

    /// Add one scene's pair of episodes.
    pub fn record(&mut self, seed: u64, closed: &EpisodeResult, single: &EpisodeResult) {
        self.seeds.push(seed);
        self.closed_loop_success += closed.success as usize;
        self.closed_loop_collisions += closed.collision as usize;
        self.single_shot_success += single.success as usize;
        self.single_shot_collisions += single.collision as usize;
    }

    pub fn report(&self) -> String {
        let mut s = String::from("policy\tepisodes\tsuccess_rate\tcollision_rate\n");
        for (name, ok, col) in [
            ("closed_loop", self.closed_loop_success, self.closed_loop_collisions),
            ("single_shot", self.single_shot_success, self.single_shot_collisions),
        ] {
            let _ = writeln!(s, "{name}\t{}\t{:.2}\t{:.2}", self.episodes(), self.rate(ok), self.rate(col));
        }
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "seeds\t{}", seeds.join(","));
        s
    }
}

/// Run both policies on each scene with the same model.
pub fn compare_policies(
    scenes: &[(u64, Scene)],
    model: &mut dyn ViewModel,
    cfg: &SimConfig,
) -> Result<PolicyComparison> {
    let mut out = PolicyComparison::default();
    for (seed, scene) in scenes {
        let closed = run_episode(scene, model, cfg)?;
        let single = run_single_shot(scene, model, cfg)?;
        out.record(*seed, &closed, &single);
    }
    Ok(out)
}
