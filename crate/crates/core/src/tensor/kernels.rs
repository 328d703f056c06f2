//! Raw forward/backward kernels. These operate on plain tensors and know
//! nothing about the tape; [`super::Graph`] wires them together.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of elements in one im2col tile.
const COL_TILE_ELEMS: usize = 1 << 20;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = input.0;
        let [cout, wcin, kh, kw] = weight.0;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input {input} has {cin} channels but weight {weight} expects {wcin}"),
            ));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("weight {weight}: kernel must be square 1x1 or 3x3"),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be positive".into()));
        }
        let out = |len: usize| -> Option<usize> {
            let padded = len + 2 * padding;
            if padded < kh {
                None
            } else {
                Some((padded - kh) / stride + 1)
            }
        };
        let (out_h, out_w) = match (out(h), out(w)) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input {input} with kernel {kh}, stride {stride}, padding {padding} gives an empty output"
                    ),
                ))
            }
        };
        Ok(ConvGeom {
            batch: n,
            cin,
            cout,
            kernel: kh,
            stride,
            padding,
            in_h: h,
            in_w: w,
            out_h,
            out_w,
        })
    }

    fn cols_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output rows processed per im2col tile.
    fn tile_rows(&self) -> usize {
        (COL_TILE_ELEMS / (self.cols_rows() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.batch, self.cout, self.out_h, self.out_w)
    }
}

/// Fill `cols` (row-major `[cin*k*k, rows*out_w]`) for output rows
/// `y0..y0+rows` of one batch item.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], y0: usize, rows: usize, cols: &mut [T]) {
    let k = g.kernel;
    let p = rows * g.out_w;
    for ci in 0..g.cin {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..rows {
                    let iy = ((y0 + oy) * g.stride + ky) as isize - g.padding as isize;
                    let row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column tile back onto the input gradient of one batch item.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], y0: usize, rows: usize, dx: &mut [T]) {
    let k = g.kernel;
    let p = rows * g.out_w;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..rows {
                    let iy = ((y0 + oy) * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `bias` has one entry per output
/// channel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &[T],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    if bias.len() != g.cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries, weight {} has {} outputs", bias.len(), w.shape(), g.cout),
        ));
    }
    let kk = g.cols_rows();
    let out_plane = g.out_h * g.out_w;
    let in_item = g.cin * g.in_h * g.in_w;
    let mut out = Tensor::zeros(g.output_shape());
    let wd = w.data();
    let tile = g.tile_rows();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * tile * g.out_w]
    };
    for n in 0..g.batch {
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        let on = &mut out.data_mut()[n * g.cout * out_plane..(n + 1) * g.cout * out_plane];
        if g.is_pointwise() {
            T::gemm(
                g.cout, kk, out_plane, T::one(), wd, kk as isize, 1, xn, out_plane as isize, 1,
                T::zero(), on, out_plane as isize, 1,
            );
        } else {
            let mut y0 = 0;
            while y0 < g.out_h {
                let rows = tile.min(g.out_h - y0);
                let p = rows * g.out_w;
                let cols = &mut cols[..kk * p];
                im2col(&g, xn, y0, rows, cols);
                T::gemm(
                    g.cout,
                    kk,
                    p,
                    T::one(),
                    wd,
                    kk as isize,
                    1,
                    cols,
                    p as isize,
                    1,
                    T::zero(),
                    &mut on[y0 * g.out_w..],
                    out_plane as isize,
                    1,
                );
                y0 += rows;
            }
        }
        for (co, b) in bias.iter().enumerate() {
            if *b != T::zero() {
                for v in &mut on[co * out_plane..(co + 1) * out_plane] {
                    *v += *b;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution. `dx` is only computed when `need_dx`.
pub struct ConvGrads<T: Scalar> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    if dy.shape() != g.output_shape() {
        return Err(Error::shape(
            "conv2d backward",
            format!("upstream gradient {} vs output {}", dy.shape(), g.output_shape()),
        ));
    }
    let kk = g.cols_rows();
    let out_plane = g.out_h * g.out_w;
    let in_item = g.cin * g.in_h * g.in_w;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let wd = w.data();
    let tile = g.tile_rows();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * tile * g.out_w }];
    let mut dcols = cols.clone();

    for n in 0..g.batch {
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        let dyn_ = &dy.data()[n * g.cout * out_plane..(n + 1) * g.cout * out_plane];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dyn_[co * out_plane..(co + 1) * out_plane].iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            // dW[cout, cin] += dY[cout, P] * X^T[P, cin]
            T::gemm(
                g.cout, out_plane, kk, T::one(), dyn_, out_plane as isize, 1, xn, 1,
                out_plane as isize, T::one(), dw.data_mut(), kk as isize, 1,
            );
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.data_mut()[n * in_item..(n + 1) * in_item];
                // dX[cin, P] = W^T[cin, cout] * dY[cout, P]
                T::gemm(
                    kk, g.cout, out_plane, T::one(), wd, 1, kk as isize, dyn_, out_plane as isize,
                    1, T::zero(), dxn, out_plane as isize, 1,
                );
            }
            continue;
        }
        let mut y0 = 0;
        while y0 < g.out_h {
            let rows = tile.min(g.out_h - y0);
            let p = rows * g.out_w;
            let cols = &mut cols[..kk * p];
            im2col(&g, xn, y0, rows, cols);
            let dy_tile = &dyn_[y0 * g.out_w..];
            T::gemm(
                g.cout,
                p,
                kk,
                T::one(),
                dy_tile,
                out_plane as isize,
                1,
                cols,
                1,
                p as isize,
                T::one(),
                dw.data_mut(),
                kk as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut dcols[..kk * p];
                T::gemm(
                    kk,
                    g.cout,
                    p,
                    T::one(),
                    wd,
                    1,
                    kk as isize,
                    dy_tile,
                    out_plane as isize,
                    1,
                    T::zero(),
                    dcols,
                    p as isize,
                    1,
                );
                col2im(&g, dcols, y0, rows, &mut dx.data_mut()[n * in_item..(n + 1) * in_item]);
            }
            y0 += rows;
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Source index pair and interpolation weight for each output coordinate of
/// an align-corners resize from `len` to `len * scale`.
fn axis_table(len: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    let out = len * scale;
    (0..out)
        .map(|o| {
            let src = if out > 1 && len > 1 {
                o as f64 * (len - 1) as f64 / (out - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Align-corners bilinear upsampling by an integer factor.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(Error::Invalid("upsample: scale must be >= 1".into()));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (h * scale, w * scale);
    let ty = axis_table(h, scale);
    let tx = axis_table(w, scale);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut rows = vec![T::zero(); h * ow];
    for (pi, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[pi * h * w..(pi + 1) * h * w];
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (ox, &(a, b, f)) in tx.iter().enumerate() {
                let f = T::lit(f);
                rows[y * ow + ox] = s[a] + (s[b] - s[a]) * f;
            }
        }
        for (oy, &(a, b, f)) in ty.iter().enumerate() {
            let f = T::lit(f);
            let (ra, rb) = (&rows[a * ow..(a + 1) * ow], &rows[b * ow..(b + 1) * ow]);
            for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = ra[ox] + (rb[ox] - ra[ox]) * f;
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward<T: Scalar>(input_shape: Shape, dy: &Tensor<T>, scale: usize) -> Tensor<T> {
    if scale == 1 {
        return dy.clone();
    }
    let [_, _, h, w] = input_shape.0;
    let (oh, ow) = (h * scale, w * scale);
    let ty = axis_table(h, scale);
    let tx = axis_table(w, scale);
    let mut dx = Tensor::zeros(input_shape);
    let mut rows = vec![T::zero(); h * ow];
    for (pi, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let g = &dy.data()[pi * oh * ow..(pi + 1) * oh * ow];
        rows.fill(T::zero());
        for (oy, &(a, b, f)) in ty.iter().enumerate() {
            let f = T::lit(f);
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                rows[a * ow + ox] += v * (T::one() - f);
                rows[b * ow + ox] += v * f;
            }
        }
        for y in 0..h {
            let r = &rows[y * ow..(y + 1) * ow];
            let d = &mut dst[y * w..(y + 1) * w];
            for (ox, &(a, b, f)) in tx.iter().enumerate() {
                let f = T::lit(f);
                d[a] += r[ox] * (T::one() - f);
                d[b] += r[ox] * f;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(N, H, W)`, accumulated in
/// double precision.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape().0;
    let m = (n * x.shape().plane()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).flat_map(|b| x.plane(b, ch)).map(|v| v.as_f64()).sum();
        mean[ch] = s / m;
        let q: f64 = (0..n)
            .flat_map(|b| x.plane(b, ch))
            .map(|v| (v.as_f64() - mean[ch]).powi(2))
            .sum();
        var[ch] = q / m;
    }
    (mean, var)
}

/// Normalize each channel with the given statistics, then scale and shift.
/// Returns `(y, xhat, inv_std)`.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, _, _] = x.shape().0;
    let p = x.shape().plane();
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + eps).sqrt())).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * p;
            let mu = T::lit(mean[ch]);
            let src = &x.data()[off..off + p];
            let xh = &mut xhat.data_mut()[off..off + p];
            for (d, s) in xh.iter_mut().zip(src) {
                *d = (*s - mu) * inv_std[ch];
            }
            let yd = &mut y.data_mut()[off..off + p];
            for (d, s) in yd.iter_mut().zip(xh.iter()) {
                *d = *s * gamma[ch] + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Batch-norm gradients. With `batch_stats` the normalization statistics
/// are treated as functions of the input (training mode); otherwise they are
/// constants (evaluation mode).
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _] = dy.shape().0;
    let p = dy.shape().plane();
    let m = T::lit((n * p) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * p;
            for (g, xh) in dy.data()[off..off + p].iter().zip(&xhat.data()[off..off + p]) {
                dbeta[ch] += *g;
                dgamma[ch] += *g * *xh;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let k = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * p;
            let out = &mut dx.data_mut()[off..off + p];
            let g = &dy.data()[off..off + p];
            let xh = &xhat.data()[off..off + p];
            if batch_stats {
                for i in 0..p {
                    out[i] = k * (g[i] - (dbeta[ch] + xh[i] * dgamma[ch]) / m);
                }
            } else {
                for i in 0..p {
                    out[i] = k * g[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_channel_mismatch_naming_both_shapes() {
        let err = ConvGeom::new(Shape::new(1, 2, 5, 5), Shape::new(3, 4, 3, 3), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,2,5,5)") && msg.contains("(3,4,3,3)"), "{msg}");
    }

    #[test]
    fn geometry_rejects_empty_output() {
        assert!(ConvGeom::new(Shape::new(1, 1, 2, 2), Shape::new(1, 1, 3, 3), 1, 0).is_err());
        assert!(ConvGeom::new(Shape::new(1, 1, 2, 2), Shape::new(1, 1, 5, 5), 1, 2).is_err());
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(Shape::new(1, 1, 224, 224), Shape::new(1, 1, 3, 3), 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        let g = ConvGeom::new(Shape::new(1, 1, 7, 9), Shape::new(1, 1, 3, 3), 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 4));
    }

    #[test]
    fn tiled_and_untiled_convolution_agree() {
        // a wide input forces several im2col tiles
        let (cin, h, wd) = (16, 60, 400);
        let x = Tensor::<f64>::from_fn(Shape::new(1, cin, h, wd), |[_, c, y, x]| {
            ((c * 7 + y * 3 + x) % 11) as f64 - 5.0
        });
        let w = Tensor::<f64>::from_fn(Shape::new(2, cin, 3, 3), |[o, c, y, x]| {
            ((o + c * 2 + y + x * 5) % 7) as f64 * 0.1
        });
        let g = ConvGeom::new(x.shape(), w.shape(), 1, 1).unwrap();
        assert!(g.tile_rows() < g.out_h);
        let y = conv2d_forward(&x, &w, &[0.5, -0.5], 1, 1).unwrap();
        for &(o, yy, xx) in &[(0usize, 0usize, 0usize), (1, 35, 17), (0, 59, 399), (1, 23, 0), (0, 18, 200)] {
            let mut want = if o == 0 { 0.5 } else { -0.5 };
            for c in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = yy as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                            want += x.at(0, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            assert!((y.at(0, o, yy, xx) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn axis_table_hits_corners() {
        let t = axis_table(2, 2);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3].0, 1);
        assert_eq!(t[3].2, 0.0);
        let t = axis_table(1, 4);
        assert!(t.iter().all(|&(a, b, f)| a == 0 && b == 0 && f == 0.0));
    }
}
