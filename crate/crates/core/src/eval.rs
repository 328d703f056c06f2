//! Rectangle metric, oriented-rectangle IoU and accuracy aggregation.

use std::time::Instant;

use crate::codec::{angle_distance, decode_grasps, DecodeConfig, Detection, GraspRectangle, JAW_ASPECT};
use crate::data::{preprocess, Channels, Dataset, PrepConfig, Prepared, SplitMode};
use crate::error::{Error, Result};
use crate::model::{GraspMaps, Model};
use crate::tensor::Mode;

/// IoU must exceed this for a match.
pub const IOU_THRESHOLD: f64 = 0.25;
/// Angle difference (mod π) must be below this for a match.
pub const ANGLE_THRESHOLD_DEG: f64 = 30.0;

pub type Point = (f64, f64);

/// Shoelace signed area; positive for counter-clockwise order in a y-up frame.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn oriented(poly: &[Point]) -> Vec<Point> {
    let mut p = poly.to_vec();
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

/// Sutherland–Hodgman clip of `subject` by the convex polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let clip = oriented(clip);
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: Point| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Intersection over union of two convex polygons.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> f64 {
    let (aa, ab) = (polygon_area(a), polygon_area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(a, b));
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of the two grasps' jaw rectangles (`width` across, `width/2` along
/// the plates).
pub fn rect_iou(a: &GraspRectangle, b: &GraspRectangle) -> f64 {
    polygon_iou(&a.corners(JAW_ASPECT), &b.corners(JAW_ASPECT))
}

/// True if `pred` overlaps some ground truth by more than 25% IoU with an
/// angle difference under 30°.
pub fn is_match(pred: &GraspRectangle, gts: &[GraspRectangle]) -> bool {
    let max_angle = ANGLE_THRESHOLD_DEG.to_radians();
    gts.iter()
        .any(|g| angle_distance(pred.theta, g.theta) < max_angle && rect_iou(pred, g) > IOU_THRESHOLD)
}

/// Anything that turns a preprocessed sample into grasp maps.
pub trait GraspPredictor {
    fn predict(&mut self, sample: &Prepared) -> Result<GraspMaps>;
}

impl GraspPredictor for Model {
    fn predict(&mut self, sample: &Prepared) -> Result<GraspMaps> {
        let want = self.config().input_channels;
        let got = sample.input.shape().c();
        if want != got {
            return Err(Error::config(
                "channels",
                format!("model expects {want} input channels, data provides {got}"),
            ));
        }
        let mut maps = self.forward(&sample.input, Mode::Eval)?;
        Ok(maps.remove(0))
    }
}

/// Returns the rasterized ground truth.
pub struct OracleModel;

impl GraspPredictor for OracleModel {
    fn predict(&mut self, sample: &Prepared) -> Result<GraspMaps> {
        Ok(sample.target.clone())
    }
}

/// Returns all-zero maps.
pub struct ZeroModel;

impl GraspPredictor for ZeroModel {
    fn predict(&mut self, sample: &Prepared) -> Result<GraspMaps> {
        Ok(GraspMaps::zeros(sample.target.height, sample.target.width))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub matched: usize,
    pub total: usize,
    /// Mean over images of the per-image median forward+decode time.
    pub mean_ms: f64,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub prep: PrepConfig,
    pub decode: DecodeConfig,
    /// Timed repetitions per image; the median is kept. 1 disables repeats.
    pub timing_repeats: usize,
}

impl EvalConfig {
    pub fn new(channels: Channels, size: usize) -> Self {
        EvalConfig {
            prep: PrepConfig::new(channels, size),
            decode: DecodeConfig::default(),
            timing_repeats: 1,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Top-1 prediction of one prepared sample and its wall time in ms.
pub fn predict_top1(
    model: &mut dyn GraspPredictor,
    prepared: &Prepared,
    decode: &DecodeConfig,
) -> Result<(Option<Detection>, f64)> {
    let t = Instant::now();
    let maps = model.predict(prepared)?;
    let dets = decode_grasps(&maps, &DecodeConfig { k: 1, ..*decode })?;
    Ok((dets.first().copied(), t.elapsed().as_secs_f64() * 1e3))
}

/// Top-1 accuracy over `indices` of `dataset`.
pub fn evaluate(
    model: &mut dyn GraspPredictor,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let prep = PrepConfig {
        augment: None,
        ..cfg.prep
    };
    let (mut matched, mut total) = (0, 0);
    let mut times = Vec::new();
    for &i in indices {
        let sample = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
        let p = preprocess(sample, &prep, 0)?;
        if p.rects.is_empty() {
            log::warn!("{}: no ground-truth grasps, excluded", sample.source);
            continue;
        }
        let mut runs = Vec::with_capacity(cfg.timing_repeats.max(1));
        let mut best = None;
        for _ in 0..cfg.timing_repeats.max(1) {
            let (d, ms) = predict_top1(model, &p, &cfg.decode)?;
            best = d;
            runs.push(ms);
        }
        times.push(median(runs));
        total += 1;
        if best.is_some_and(|d| is_match(&d.rect, &p.rects)) {
            matched += 1;
        }
    }
    let mean_ms = if times.is_empty() {
        0.0
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    };
    Ok(Metrics {
        matched,
        total,
        mean_ms,
    })
}

/// Results of one evaluated fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
}

/// Whitespace-separated results table: a header, one row per fold and a
/// mean row. Accuracies print in shortest round-trip form so the file
/// reproduces the computed values exactly. Timing is not included; see
/// [`timing_table`].
pub fn results_table(method: &str, channels: Channels, mode: SplitMode, folds: &[FoldResult]) -> String {
    let mut s = String::from("method\tchannels\tsplit\tfold\taccuracy\tmatched\ttotal\n");
    for f in folds {
        s.push_str(&format!(
            "{method}\t{channels}\t{mode}\t{}\t{}\t{}\t{}\n",
            f.fold,
            f.metrics.accuracy(),
            f.metrics.matched,
            f.metrics.total
        ));
    }
    if !folds.is_empty() {
        let mean = folds.iter().map(|f| f.metrics.accuracy()).sum::<f64>() / folds.len() as f64;
        let matched: usize = folds.iter().map(|f| f.metrics.matched).sum();
        let total: usize = folds.iter().map(|f| f.metrics.total).sum();
        s.push_str(&format!("{method}\t{channels}\t{mode}\tmean\t{mean}\t{matched}\t{total}\n"));
    }
    s
}

/// Per-fold mean inference time in milliseconds.
pub fn timing_table(folds: &[FoldResult]) -> String {
    let mut s = String::from("fold\tms\n");
    for f in folds {
        s.push_str(&format!("{}\t{:.3}\n", f.fold, f.metrics.mean_ms));
    }
    s
}

/// Parse the rows of [`results_table`] back into `(fold label, accuracy)`.
pub fn parse_results(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let acc = f
                .get(4)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Invalid(format!("results row {l:?}")))?;
            Ok((f[3].to_string(), acc))
        })
        .collect()
}
