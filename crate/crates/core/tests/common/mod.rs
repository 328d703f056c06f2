//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hrgnet::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(Shape::new(n, cout, oh, ow), out).unwrap()
}

/// Align-corners bilinear upsampling written as the 2-D closed form at each
/// output pixel.
pub fn bilinear_closed_form(x: &Tensor<f64>, scale: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (h * scale, w * scale);
    Tensor::from_fn(Shape::new(n, c, oh, ow), |[b, ch, oy, ox]| {
        let sy = if oh > 1 { oy as f64 * (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
        let sx = if ow > 1 { ox as f64 * (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        (1.0 - fy) * (1.0 - fx) * x.at(b, ch, y0, x0)
            + (1.0 - fy) * fx * x.at(b, ch, y0, x1)
            + fy * (1.0 - fx) * x.at(b, ch, y1, x0)
            + fy * fx * x.at(b, ch, y1, x1)
    })
}

fn inside_convex(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// IoU by sampling an `n × n` grid of cell centres over the joint bounding box.
pub fn raster_iou(a: &[(f64, f64)], b: &[(f64, f64)], n: usize) -> f64 {
    let all: Vec<&(f64, f64)> = a.iter().chain(b).collect();
    let x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let p = (
                x0 + (j as f64 + 0.5) * (x1 - x0) / n as f64,
                y0 + (i as f64 + 0.5) * (y1 - y0) / n as f64,
            );
            let (ia, ib) = (inside_convex(a, p), inside_convex(b, p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Relative error used by every finite-difference check.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
