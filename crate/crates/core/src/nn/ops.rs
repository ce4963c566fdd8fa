//! Differentiable primitives. Each op has a forward function and a matching
//! backward function; backward functions receive whatever the forward pass
//! cached plus the upstream gradient.
//!
//! Batch-parallel reductions (convolution weight gradients) are computed as
//! per-item partials and summed in item order, so results do not depend on
//! the execution mode.

use crate::error::{Error, Result};
use crate::nn::real::{matmul, Real};
use crate::nn::tensor::Tensor;
use crate::par::Exec;

// ---------------------------------------------------------------------------
// Convolution (stride 1, "same" zero padding)
// ---------------------------------------------------------------------------

/// Unfolds one `(c, h, w)` item into a `(c*k*k, h*w)` column matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto the `(c, h, w)` input.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    dx.fill(T::zero());
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + ddx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `(out, in, k, k)` flattened, `bias` has `out` entries.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    k: usize,
    exec: Exec,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if weight.len() != out_channels * c * k * k || bias.len() != out_channels {
        return Err(Error::dims(
            format!("weights for {c}->{out_channels} k{k}"),
            format!("{} weights, {} biases", weight.len(), bias.len()),
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros([b, out_channels, h, w]);
    exec.for_each_chunk_mut(out.data_mut(), out_channels * hw, |bi, y| {
        for (o, &bv) in bias.iter().enumerate() {
            y[o * hw..(o + 1) * hw].fill(bv);
        }
        let item = x.item(bi);
        if k == 1 {
            matmul(out_channels, c, hw, weight, false, item, false, T::one(), y);
        } else {
            let mut col = vec![T::zero(); c * k * k * hw];
            im2col(item, c, h, w, k, &mut col);
            matmul(out_channels, c * k * k, hw, weight, false, &col, false, T::one(), y);
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    exec: Exec,
) -> ConvGrads<T> {
    let [b, c, h, w] = x.shape();
    let out_channels = dy.channels();
    let hw = h * w;
    let ck = c * k * k;
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = exec.map_collect(b, |bi| {
        let item = x.item(bi);
        let g = dy.item(bi);
        let mut dw = vec![T::zero(); out_channels * ck];
        let mut dcol = vec![T::zero(); ck * hw];
        let db: Vec<T> = (0..out_channels)
            .map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum())
            .collect();
        if k == 1 {
            // dW = dY X^T ; dX = W^T dY
            matmul(out_channels, hw, c, g, false, item, true, T::zero(), &mut dw);
            matmul(c, out_channels, hw, weight, true, g, false, T::zero(), &mut dcol);
            (dcol, dw, db)
        } else {
            let mut col = vec![T::zero(); ck * hw];
            im2col(item, c, h, w, k, &mut col);
            matmul(out_channels, hw, ck, g, false, &col, true, T::zero(), &mut dw);
            matmul(ck, out_channels, hw, weight, true, g, false, T::zero(), &mut dcol);
            let mut dx = vec![T::zero(); c * hw];
            col2im(&dcol, c, h, w, k, &mut dx);
            (dx, dw, db)
        }
    });
    let mut dx = Tensor::zeros(x.shape());
    let mut dweight = vec![T::zero(); out_channels * ck];
    let mut dbias = vec![T::zero(); out_channels];
    let item_len = c * hw;
    for (bi, (dxi, dw, db)) in partials.into_iter().enumerate() {
        dx.data_mut()[bi * item_len..(bi + 1) * item_len].copy_from_slice(&dxi);
        for (a, v) in dweight.iter_mut().zip(dw) {
            *a += v;
        }
        for (a, v) in dbias.iter_mut().zip(db) {
            *a += v;
        }
    }
    ConvGrads { dx, dweight, dbias }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics used to normalize in the forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (train) or running statistics (eval).
    pub batch_stats: bool,
}

/// Per-channel (sum, sum of squares) over batch and space, accumulated in
/// f64 in fixed order.
fn channel_moments<T: Real>(x: &Tensor<T>, exec: Exec) -> Vec<(f64, f64)> {
    let [b, c, _, _] = x.shape();
    exec.map_collect(c, |ci| {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for bi in 0..b {
            for &v in x.plane(bi, ci) {
                let v = v.as_f64();
                s += v;
                s2 += v * v;
            }
        }
        (s, s2)
    })
}

fn apply_affine<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    exec: Exec,
) -> Tensor<T> {
    let c = x.channels();
    let p = x.plane_len();
    let mut y = Tensor::zeros(x.shape());
    exec.for_each_chunk_mut(y.data_mut(), p, |idx, out| {
        let ci = idx % c;
        let src = &x.data()[idx * p..(idx + 1) * p];
        let scale = gamma[ci] * inv_std[ci];
        let shift = beta[ci] - mean[ci] * scale;
        for (o, &v) in out.iter_mut().zip(src) {
            *o = v * scale + shift;
        }
    });
    y
}

/// Training-mode batchnorm. Updates `running_mean` / `running_var`
/// (unbiased) with momentum [`BN_MOMENTUM`].
pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    exec: Exec,
) -> (Tensor<T>, BnCache<T>) {
    let [b, _, h, w] = x.shape();
    let n = (b * h * w) as f64;
    let moments = channel_moments(x, exec);
    let mut mean = Vec::with_capacity(moments.len());
    let mut inv_std = Vec::with_capacity(moments.len());
    for (ci, &(s, s2)) in moments.iter().enumerate() {
        let m = s / n;
        let var = (s2 / n - m * m).max(0.0);
        mean.push(T::from_f64_lossy(m));
        inv_std.push(T::from_f64_lossy(1.0 / (var + BN_EPS).sqrt()));
        let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
        running_mean[ci] = T::from_f64_lossy(
            (1.0 - BN_MOMENTUM) * running_mean[ci].as_f64() + BN_MOMENTUM * m,
        );
        running_var[ci] = T::from_f64_lossy(
            (1.0 - BN_MOMENTUM) * running_var[ci].as_f64() + BN_MOMENTUM * unbiased,
        );
    }
    let y = apply_affine(x, &mean, &inv_std, gamma, beta, exec);
    (
        y,
        BnCache {
            mean,
            inv_std,
            batch_stats: true,
        },
    )
}

pub fn batchnorm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    exec: Exec,
) -> (Tensor<T>, BnCache<T>) {
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let y = apply_affine(x, running_mean, &inv_std, gamma, beta, exec);
    (
        y,
        BnCache {
            mean: running_mean.to_vec(),
            inv_std,
            batch_stats: false,
        },
    )
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batchnorm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    dy: &Tensor<T>,
    exec: Exec,
) -> BnGrads<T> {
    let [b, c, h, w] = x.shape();
    let p = h * w;
    // per-channel Σdy and Σdy·x̂
    let sums: Vec<(T, T)> = exec.map_collect(c, |ci| {
        let (mut sd, mut sdx) = (T::zero(), T::zero());
        for bi in 0..b {
            let xs = x.plane(bi, ci);
            let gs = dy.plane(bi, ci);
            for (&xv, &g) in xs.iter().zip(gs) {
                let xhat = (xv - cache.mean[ci]) * cache.inv_std[ci];
                sd += g;
                sdx += g * xhat;
            }
        }
        (sd, sdx)
    });
    let n = T::from_usize(b * p).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    exec.for_each_chunk_mut(dx.data_mut(), p, |idx, out| {
        let ci = idx % c;
        let xs = &x.data()[idx * p..(idx + 1) * p];
        let gs = &dy.data()[idx * p..(idx + 1) * p];
        let scale = gamma[ci] * cache.inv_std[ci];
        if cache.batch_stats {
            let (sd, sdx) = sums[ci];
            for ((o, &xv), &g) in out.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - cache.mean[ci]) * cache.inv_std[ci];
                *o = scale * (g - sd / n - xhat * sdx / n);
            }
        } else {
            for (o, &g) in out.iter_mut().zip(gs) {
                *o = scale * g;
            }
        }
    });
    BnGrads {
        dx,
        dgamma: sums.iter().map(|s| s.1).collect(),
        dbeta: sums.iter().map(|s| s.0).collect(),
    }
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    y
}

/// Uses the forward output: gradient passes where the output is positive.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    dx
}

/// 2x2 stride-2 max pooling. Returns the output and, per output element, the
/// flat in-plane index of the selected input. Ties keep the first element in
/// row-major window order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>, exec: Exec) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("maxpool2 needs even spatial size, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let op = oh * ow;
    let mut y = Tensor::zeros([b, c, oh, ow]);
    let mut arg = vec![0u32; b * c * op];
    let mut pairs: Vec<(T, u32)> = vec![(T::zero(), 0); b * c * op];
    exec.for_each_chunk_mut(&mut pairs, op, |idx, out| {
        let src = &x.data()[idx * h * w..(idx + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out[oy * ow + ox] = (src[best], best as u32);
            }
        }
    });
    for (k, (v, a)) in pairs.into_iter().enumerate() {
        y.data_mut()[k] = v;
        arg[k] = a;
    }
    Ok((y, arg))
}

pub fn maxpool2_backward<T: Real>(input_shape: [usize; 4], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let ip = input_shape[2] * input_shape[3];
    let op = dy.plane_len();
    for (k, (&a, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        let plane = k / op;
        dx.data_mut()[plane * ip + a as usize] += g;
    }
    dx
}

/// Source taps for doubling an axis of length `n` with half-pixel-centred
/// bilinear interpolation (edges clamped): `(i0, i1, weight_of_i1)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>, exec: Exec) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut y = Tensor::zeros([b, c, oh, ow]);
    exec.for_each_chunk_mut(y.data_mut(), oh * ow, |idx, out| {
        let src = &x.data()[idx * h * w..(idx + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    y
}

pub fn upsample2_backward<T: Real>(input_shape: [usize; 4], dy: &Tensor<T>, exec: Exec) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros(input_shape);
    exec.for_each_chunk_mut(dx.data_mut(), h * w, |idx, out| {
        let g = &dy.data()[idx * oh * ow..(idx + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[oy * ow + ox];
                out[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                out[y0 * w + x1] += v * (T::one() - fy) * fx;
                out[y1 * w + x0] += v * fy * (T::one() - fx);
                out[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(Error::dims(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for bi in 0..n {
        data.extend_from_slice(a.item(bi));
        data.extend_from_slice(b.item(bi));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

pub fn concat_backward<T: Real>(dy: &Tensor<T>, channels_a: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.shape();
    let p = h * w;
    let cb = c - channels_a;
    let mut da = Vec::with_capacity(n * channels_a * p);
    let mut db = Vec::with_capacity(n * cb * p);
    for bi in 0..n {
        let item = dy.item(bi);
        da.extend_from_slice(&item[..channels_a * p]);
        db.extend_from_slice(&item[channels_a * p..]);
    }
    (
        Tensor::from_vec([n, channels_a, h, w], da).unwrap(),
        Tensor::from_vec([n, cb, h, w], db).unwrap(),
    )
}

/// Mean absolute error over all elements and its (sub)gradient, with the
/// gradient at ties defined as zero.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    target.check_shape(pred.shape())?;
    let n = pred.len() as f64;
    let inv = T::from_f64_lossy(1.0 / n);
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d.abs().as_f64();
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok((loss / n, grad))
}
