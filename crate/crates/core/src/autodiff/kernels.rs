//! Forward and backward kernels on dense buffers. The graph in
//! [`super::graph`] owns bookkeeping; everything numeric lives here.

use crate::tensor::{ConvSpec, Float, Shape};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn offset(base: usize, k: usize, dilation: usize, pad: usize) -> isize {
    (base + k * dilation) as isize - pad as isize
}

/// Unfold one image `(c, h, w)` into columns `(c·kh·kw, oh·ow)`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let out_plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..oh {
                    let iy = offset(oy * spec.stride, ki, spec.dilation, spec.padding);
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = offset(ox * spec.stride, kj, spec.dilation, spec.padding);
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Float>(cols: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, dx: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let out_plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..oh {
                    let iy = offset(oy * spec.stride, ki, spec.dilation, spec.padding);
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = offset(ox * spec.stride, kj, spec.dilation, spec.padding);
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
}

pub fn conv2d_forward<T: Float>(x: &[T], xs: Shape, spec: &ConvSpec, weight: &[T], bias: Option<&[T]>, oh: usize, ow: usize) -> Vec<T> {
    let ck = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let out_plane = oh * ow;
    let in_img = xs.c * xs.plane();
    let out_img = spec.out_channels * out_plane;
    let mut out = vec![T::zero(); xs.n * out_img];
    let mut cols = if is_pointwise(spec) {
        Vec::new()
    } else {
        vec![T::zero(); ck * out_plane]
    };
    for n in 0..xs.n {
        let xn = &x[n * in_img..(n + 1) * in_img];
        let yn = &mut out[n * out_img..(n + 1) * out_img];
        let b_mat: &[T] = if is_pointwise(spec) {
            xn
        } else {
            im2col(xn, xs.c, xs.h, xs.w, spec, oh, ow, &mut cols);
            &cols
        };
        T::gemm(spec.out_channels, ck, out_plane, weight, false, b_mat, false, yn, false);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                yn[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    xs: Shape,
    spec: &ConvSpec,
    weight: &[T],
    dy: &[T],
    oh: usize,
    ow: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ck = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let out_plane = oh * ow;
    let in_img = xs.c * xs.plane();
    let out_img = spec.out_channels * out_plane;
    let pointwise = is_pointwise(spec);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = need.2.then(|| vec![T::zero(); spec.out_channels]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ck * out_plane] };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); ck * out_plane]
    };
    for n in 0..xs.n {
        let xn = &x[n * in_img..(n + 1) * in_img];
        let dyn_ = &dy[n * out_img..(n + 1) * out_img];
        if let Some(dw) = dw.as_mut() {
            let b_mat: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, xs.c, xs.h, xs.w, spec, oh, ow, &mut cols);
                &cols
            };
            T::gemm(spec.out_channels, out_plane, ck, dyn_, false, b_mat, true, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyn_[o * out_plane..(o + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_img..(n + 1) * in_img];
            if pointwise {
                T::gemm(ck, spec.out_channels, out_plane, weight, true, dyn_, false, dxn, true);
            } else {
                T::gemm(ck, spec.out_channels, out_plane, weight, true, dyn_, false, &mut dcols, false);
                col2im(&dcols, xs.c, xs.h, xs.w, spec, oh, ow, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel mean and biased variance over (n, h, w), accumulated in f64.
pub fn channel_stats<T: Float>(x: &[T], s: Shape) -> (Vec<f64>, Vec<f64>) {
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            sum += x[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            sq += x[start..start + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// `y = scale · (x − mean) · inv_std + shift` per channel.
pub fn batch_norm_apply<T: Float>(x: &[T], s: Shape, mean: &[f64], inv_std: &[f64], scale: &[T], shift: &[T]) -> Vec<T> {
    let plane = s.plane();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let a = T::from_f64_lossy(scale[c].as_f64() * inv_std[c]);
            let b = T::from_f64_lossy(shift[c].as_f64() - scale[c].as_f64() * inv_std[c] * mean[c]);
            for (o, &v) in out[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                *o = a * v + b;
            }
        }
    }
    out
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dscale: Vec<T>,
    pub dshift: Vec<T>,
}

/// Backward of batch norm. `batch_stats` selects the training-mode
/// gradient, which also flows through the batch mean and variance.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Float>(
    x: &[T],
    s: Shape,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[T],
    dy: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); s.c];
    let mut dshift = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (m, is) = (mean[c], inv_std[c]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for (&g, &v) in dy[start..start + plane].iter().zip(&x[start..start + plane]) {
                let g = g.as_f64();
                sum_dy += g;
                sum_dy_xhat += g * (v.as_f64() - m) * is;
            }
        }
        dscale[c] = T::from_f64_lossy(sum_dy_xhat);
        dshift[c] = T::from_f64_lossy(sum_dy);
        let gamma = scale[c].as_f64();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for ((d, &g), &v) in dx[start..start + plane]
                .iter_mut()
                .zip(&dy[start..start + plane])
                .zip(&x[start..start + plane])
            {
                let g = g.as_f64();
                let value = if batch_stats {
                    let xhat = (v.as_f64() - m) * is;
                    gamma * is * (g - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    gamma * is * g
                };
                *d = T::from_f64_lossy(value);
            }
        }
    }
    BnGrads { dx, dscale, dshift }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu<T: Float>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::from_f64_lossy(LEAKY_SLOPE)
    }
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Float>(x: &[T], s: Shape) -> Vec<T> {
    let plane = s.plane();
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = x[base + c * plane + p].as_f64();
                max = max.max(*b);
            }
            let mut total = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                out[base + c * plane + p] = T::from_f64_lossy(b / total);
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Float>(y: &[T], dy: &[T], s: Shape) -> Vec<T> {
    let plane = s.plane();
    let mut dx = vec![T::zero(); y.len()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let dot: f64 = (0..s.c)
                .map(|c| y[base + c * plane + p].as_f64() * dy[base + c * plane + p].as_f64())
                .sum();
            for c in 0..s.c {
                let i = base + c * plane + p;
                dx[i] = T::from_f64_lossy(y[i].as_f64() * (dy[i].as_f64() - dot));
            }
        }
    }
    dx
}

pub fn upsample_nearest<T: Float>(x: &[T], s: Shape, factor: usize) -> Vec<T> {
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut out = vec![T::zero(); s.n * s.c * oh * ow];
    for nc in 0..s.n * s.c {
        let src = &x[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * s.w..(oy / factor + 1) * s.w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = row[ox / factor];
            }
        }
    }
    out
}

/// Sum each `factor × factor` block; the adjoint of [`upsample_nearest`].
pub fn block_sum<T: Float>(dy: &[T], s: Shape, factor: usize) -> Vec<T> {
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut dx = vec![T::zero(); s.numel()];
    for nc in 0..s.n * s.c {
        let src = &dy[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut dx[nc * s.plane()..(nc + 1) * s.plane()];
        for oy in 0..oh {
            let drow = &mut dst[(oy / factor) * s.w..(oy / factor + 1) * s.w];
            for (ox, &g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                drow[ox / factor] += g;
            }
        }
    }
    dx
}

/// Non-overlapping average pooling with window and stride `factor`.
/// `s` is the input shape; spatial dims must be divisible by `factor`.
pub fn avg_pool<T: Float>(x: &[T], s: Shape, factor: usize) -> Vec<T> {
    let out_shape = Shape::new(s.n, s.c, s.h / factor, s.w / factor);
    let sums = block_sum(x, out_shape, factor);
    let inv = T::from_f64_lossy(1.0 / (factor * factor) as f64);
    sums.into_iter().map(|v| v * inv).collect()
}
