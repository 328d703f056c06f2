//! Compare the graph's conv2d against four nested loops for every
//! stride/padding/kernel combination the network uses.

use hrgnet::tensor::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h() + 2 * pad - ws.h()) / stride + 1;
    let ow = (xs.w() + 2 * pad - ws.w()) / stride + 1;
    let mut out = Vec::with_capacity(xs.n() * ws.n() * oh * ow);
    for n in 0..xs.n() {
        for co in 0..ws.n() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..xs.c() {
                        for ky in 0..ws.h() {
                            for kx in 0..ws.w() {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                                    acc += x.plane(n, ci)[iy as usize * xs.w() + ix as usize]
                                        * w.plane(co, ci)[ky * ws.w() + kx];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn main() -> hrgnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |s: Shape| Tensor::new(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect());
    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1)] {
        let x = rand(Shape::new(2, 3, 9, 8))?;
        let w = rand(Shape::new(4, 3, k, k))?;
        let mut g = Graph::new();
        let (xn, wn) = (g.input(x.clone()), g.input(w.clone()));
        let b = g.input(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = g.conv2d(xn, wn, b, stride, pad)?;
        let want = naive(&x, &w, stride, pad);
        let diff = g.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("k{k} s{stride} p{pad}  out {}  max |diff| {diff:.2e}", g.value(y).shape());
    }
    Ok(())
}
