//! Forward and backward kernels.
//!
//! Convolutional-path activations use a channels-last `[rows, length,
//! channels]` layout so that conv1d lowers to a single large GEMM per layer
//! (im2col rows stay contiguous). The public `conv1d` / `batchnorm1d`
//! wrappers accept the conventional `[batch, channels, length]` layout and
//! transpose around the fast kernels.
//!
//! Heavy kernels split work into fixed-size row chunks processed by rayon;
//! chunk boundaries do not depend on the thread count, so outputs are
//! bit-identical no matter how many workers run.

use rayon::prelude::*;

use super::Tensor;
use crate::scalar::Scalar;

/// Rows per parallel GEMM chunk. Fixed so results don't depend on --jobs.
const GEMM_CHUNK: usize = 4096;

/// GEMM with the M dimension chunked across the rayon pool.
pub(crate) fn par_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    if m <= GEMM_CHUNK {
        T::gemm(m, k, n, T::one(), a, b, T::zero(), c);
        return;
    }
    c.par_chunks_mut(GEMM_CHUNK * n)
        .enumerate()
        .for_each(|(chunk, c_chunk)| {
            let row0 = chunk * GEMM_CHUNK;
            let rows = c_chunk.len() / n;
            T::gemm(rows, k, n, T::one(), &a[row0 * k..], b, T::zero(), c_chunk);
        });
}

// ---------------------------------------------------------------------------
// Layout transposes
// ---------------------------------------------------------------------------

/// `[B, C, L]` -> `[B, L, C]`
pub fn ncl_to_nlc<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, l) = dims3(x);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            for li in 0..l {
                out[(bi * l + li) * c + ci] = xd[(bi * c + ci) * l + li];
            }
        }
    }
    Tensor::new(&[b, l, c], out)
}

/// `[B, L, C]` -> `[B, C, L]`
pub fn nlc_to_ncl<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, l, c) = dims3(x);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                out[(bi * c + ci) * l + li] = xd[(bi * l + li) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, l], out)
}

fn dims3<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected 3-d tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

// ---------------------------------------------------------------------------
// Conv1d, kernel 3, pad 1, stride 1
// ---------------------------------------------------------------------------

/// im2col for kernel 3 / pad 1 on `[R, L, C]`: output `[R*L, 3C]` where the
/// K axis is ordered (tap, channel), taps at offsets -1, 0, +1.
fn im2col_k3<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (r, l, c) = dims3(x);
    let xd = x.data();
    let mut col = vec![T::zero(); r * l * 3 * c];
    col.par_chunks_mut(l * 3 * c)
        .enumerate()
        .for_each(|(ri, row_block)| {
            let base = ri * l * c;
            for li in 0..l {
                let dst = &mut row_block[li * 3 * c..(li + 1) * 3 * c];
                for (tap, off) in [-1isize, 0, 1].into_iter().enumerate() {
                    let src_l = li as isize + off;
                    if src_l >= 0 && (src_l as usize) < l {
                        let src = base + src_l as usize * c;
                        dst[tap * c..(tap + 1) * c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        });
    col
}

/// Scatter-add of `[R*L, 3C]` column gradients back onto `[R, L, C]`.
fn col2im_k3<T: Scalar>(dcol: &[T], r: usize, l: usize, c: usize) -> Tensor<T> {
    let mut dx = vec![T::zero(); r * l * c];
    dx.par_chunks_mut(l * c).enumerate().for_each(|(ri, dx_block)| {
        let col_base = ri * l * 3 * c;
        for li in 0..l {
            let row = &dcol[col_base + li * 3 * c..col_base + (li + 1) * 3 * c];
            for (tap, off) in [-1isize, 0, 1].into_iter().enumerate() {
                let src_l = li as isize + off;
                if src_l >= 0 && (src_l as usize) < l {
                    let dst = &mut dx_block[src_l as usize * c..(src_l as usize + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&row[tap * c..(tap + 1) * c]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    });
    Tensor::new(&[r, l, c], dx)
}

/// Weight `[C_out, C_in, 3]` reshaped to the `[3*C_in, C_out]` GEMM layout.
fn weight_to_gemm<T: Scalar>(w: &Tensor<T>) -> (Vec<T>, usize, usize) {
    let s = w.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[2], 3, "conv kernel size must be 3");
    let (c_out, c_in) = (s[0], s[1]);
    let wd = w.data();
    let mut g = vec![T::zero(); 3 * c_in * c_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            for tap in 0..3 {
                g[(tap * c_in + ci) * c_out + co] = wd[(co * c_in + ci) * 3 + tap];
            }
        }
    }
    (g, c_in, c_out)
}

/// Forward conv on channels-last input `[R, L, C_in]` -> `[R, L, C_out]`.
pub fn conv1d_rlc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (r, l, c_in) = dims3(x);
    let (wg, wc_in, c_out) = weight_to_gemm(w);
    assert_eq!(c_in, wc_in, "conv1d: input has {c_in} channels, weight expects {wc_in}");
    assert_eq!(b.numel(), c_out, "conv1d: bias length mismatch");

    let col = im2col_k3(x);
    let m = r * l;
    let k = 3 * c_in;
    let mut y = vec![T::zero(); m * c_out];
    par_gemm(m, k, c_out, &col, &wg, &mut y);

    let bd = b.data();
    y.par_chunks_mut(c_out).for_each(|row| {
        for (v, bias) in row.iter_mut().zip(bd) {
            *v = *v + *bias;
        }
    });
    Tensor::new(&[r, l, c_out], y)
}

/// Gradients of the channels-last conv. Recomputes im2col from `x` rather
/// than caching it, trading a little time for a much smaller tape.
pub fn conv1d_rlc_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (r, l, c_in) = dims3(x);
    let (wg, _, c_out) = weight_to_gemm(w);
    let m = r * l;
    let k = 3 * c_in;
    let dyd = dy.data();
    assert_eq!(dyd.len(), m * c_out);

    // db: column sums of dY.
    let mut db = vec![T::zero(); c_out];
    for row in dyd.chunks_exact(c_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }

    // dWg = col^T (k×m) · dY (m×n); accumulate per fixed-size chunk to stay
    // deterministic, then fold chunks in order.
    let col = im2col_k3(x);
    let chunk_rows = GEMM_CHUNK;
    let n_chunks = m.div_ceil(chunk_rows);
    let partials: Vec<Vec<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let row0 = chunk * chunk_rows;
            let rows = chunk_rows.min(m - row0);
            let mut dwg = vec![T::zero(); k * c_out];
            T::gemm_strided(
                k, rows, c_out, T::one(),
                &col[row0 * k..], 1, k as isize,
                &dyd[row0 * c_out..], c_out as isize, 1,
                T::zero(),
                &mut dwg, c_out as isize, 1,
            );
            dwg
        })
        .collect();
    let mut dwg = vec![T::zero(); k * c_out];
    for part in &partials {
        for (acc, v) in dwg.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }
    // Back to the [C_out, C_in, 3] layout.
    let mut dw = vec![T::zero(); c_out * c_in * 3];
    for co in 0..c_out {
        for ci in 0..c_in {
            for tap in 0..3 {
                dw[(co * c_in + ci) * 3 + tap] = dwg[(tap * c_in + ci) * c_out + co];
            }
        }
    }

    // dcol = dY (m×n) · Wg^T (n×k), then scatter back.
    let mut dcol = vec![T::zero(); m * k];
    dcol.par_chunks_mut(GEMM_CHUNK * k)
        .enumerate()
        .for_each(|(chunk, dc)| {
            let row0 = chunk * GEMM_CHUNK;
            let rows = dc.len() / k;
            T::gemm_strided(
                rows, c_out, k, T::one(),
                &dyd[row0 * c_out..], c_out as isize, 1,
                &wg, 1, c_out as isize,
                T::zero(),
                dc, k as isize, 1,
            );
        });
    let dx = col2im_k3(&dcol, r, l, c_in);

    (dx, Tensor::new(w.shape(), dw), Tensor::new(&[c_out], db))
}

/// Conv1d on the conventional `[B, C_in, L]` layout (kernel 3, pad 1,
/// stride 1; length preserved).
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    nlc_to_ncl(&conv1d_rlc_forward(&ncl_to_nlc(x), w, b))
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel over rows×length)
// ---------------------------------------------------------------------------

/// Running statistics owned by the model, updated by train-mode forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        BnRunning { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Per-use normalization statistics cached for backward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Train-mode batch statistics of `[R, L, C]` per channel (f64 accumulation).
fn bn_batch_stats<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Vec<T>, Vec<T>, Vec<f64>) {
    let (r, l, c) = dims3(x);
    let n = (r * l) as f64;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for ci in 0..c {
            let v = row[ci].as_f64();
            sum[ci] += v;
            sumsq[ci] += v * v;
        }
    }
    let mut mean = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ci in 0..c {
        let m = sum[ci] / n;
        let v = (sumsq[ci] / n - m * m).max(0.0);
        mean.push(T::from_f64(m));
        inv_std.push(T::from_f64(1.0 / (v + eps).sqrt()));
        var.push(v);
    }
    (mean, inv_std, var)
}

/// Batch norm forward on `[R, L, C]`. In train mode, computes batch
/// statistics and folds them into `running` with the given momentum; in eval
/// mode, normalizes with the running statistics. Biased variance is used in
/// both places.
pub fn batchnorm_rlc_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut BnRunning<T>,
    train: bool,
    momentum: f64,
    eps: f64,
) -> (Tensor<T>, BnCache<T>) {
    let (_, _, c) = dims3(x);
    assert_eq!(gamma.numel(), c);
    assert_eq!(beta.numel(), c);
    let (mean, inv_std) = if train {
        let (mean, inv_std, var) = bn_batch_stats(x, eps);
        for ci in 0..c {
            let rm = running.mean[ci].as_f64();
            let rv = running.var[ci].as_f64();
            running.mean[ci] = T::from_f64((1.0 - momentum) * rm + momentum * mean[ci].as_f64());
            running.var[ci] = T::from_f64((1.0 - momentum) * rv + momentum * var[ci]);
        }
        (mean, inv_std)
    } else {
        let mean = running.mean.clone();
        let inv_std = running
            .var
            .iter()
            .map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        (mean, inv_std)
    };

    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![T::zero(); x.numel()];
    y.par_chunks_mut(c)
        .zip(x.data().par_chunks(c))
        .for_each(|(yrow, xrow)| {
            for ci in 0..c {
                yrow[ci] = gd[ci] * (xrow[ci] - mean[ci]) * inv_std[ci] + bd[ci];
            }
        });
    (Tensor::new(x.shape(), y), BnCache { mean, inv_std, train })
}

/// Batch norm backward. Train mode differentiates through the batch
/// statistics; eval mode treats them as constants.
pub fn batchnorm_rlc_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (r, l, c) = dims3(x);
    let n = (r * l) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let gd = gamma.data();

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut sum_g = vec![0.0f64; c]; // sum of dY*gamma
    let mut sum_gx = vec![0.0f64; c]; // sum of dY*gamma*xhat
    for (xrow, dyrow) in xd.chunks_exact(c).zip(dyd.chunks_exact(c)) {
        for ci in 0..c {
            let xhat = ((xrow[ci] - cache.mean[ci]) * cache.inv_std[ci]).as_f64();
            let dyv = dyrow[ci].as_f64();
            dgamma[ci] += dyv * xhat;
            dbeta[ci] += dyv;
            let g = dyv * gd[ci].as_f64();
            sum_g[ci] += g;
            sum_gx[ci] += g * xhat;
        }
    }

    let mut dx = vec![T::zero(); xd.len()];
    if cache.train {
        dx.par_chunks_mut(c)
            .zip(xd.par_chunks(c).zip(dyd.par_chunks(c)))
            .for_each(|(dxrow, (xrow, dyrow))| {
                for ci in 0..c {
                    let xhat = ((xrow[ci] - cache.mean[ci]) * cache.inv_std[ci]).as_f64();
                    let g = dyrow[ci].as_f64() * gd[ci].as_f64();
                    let v = cache.inv_std[ci].as_f64()
                        * (g - sum_g[ci] / n - xhat * sum_gx[ci] / n);
                    dxrow[ci] = T::from_f64(v);
                }
            });
    } else {
        dx.par_chunks_mut(c).zip(dyd.par_chunks(c)).for_each(|(dxrow, dyrow)| {
            for ci in 0..c {
                dxrow[ci] = dyrow[ci] * gd[ci] * cache.inv_std[ci];
            }
        });
    }

    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[c], dgamma.into_iter().map(T::from_f64).collect()),
        Tensor::new(&[c], dbeta.into_iter().map(T::from_f64).collect()),
    )
}

/// Batch norm on the conventional `[B, C, L]` layout.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut BnRunning<T>,
    train: bool,
    momentum: f64,
    eps: f64,
) -> Tensor<T> {
    let (y, _) = batchnorm_rlc_forward(&ncl_to_nlc(x), gamma, beta, running, train, momentum, eps);
    nlc_to_ncl(&y)
}

// ---------------------------------------------------------------------------
// Simple elementwise / pooling ops
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &dv)| if xv > T::zero() { dv } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Max pool, kernel 2 stride 2, on `[R, L, C]`. A trailing odd element is
/// dropped (floor semantics).
pub fn maxpool2_rlc_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, l, c) = dims3(x);
    let lo = l / 2;
    let xd = x.data();
    let mut y = vec![T::zero(); r * lo * c];
    for ri in 0..r {
        for li in 0..lo {
            let a = &xd[(ri * l + 2 * li) * c..(ri * l + 2 * li + 1) * c];
            let b = &xd[(ri * l + 2 * li + 1) * c..(ri * l + 2 * li + 2) * c];
            let out = &mut y[(ri * lo + li) * c..(ri * lo + li + 1) * c];
            for ci in 0..c {
                out[ci] = if a[ci] >= b[ci] { a[ci] } else { b[ci] };
            }
        }
    }
    Tensor::new(&[r, lo, c], y)
}

/// Routes gradient to the first maximal element of each window.
pub fn maxpool2_rlc_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (r, l, c) = dims3(x);
    let lo = l / 2;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = vec![T::zero(); xd.len()];
    for ri in 0..r {
        for li in 0..lo {
            let ia = (ri * l + 2 * li) * c;
            let ib = ia + c;
            let g = &dyd[(ri * lo + li) * c..(ri * lo + li + 1) * c];
            for ci in 0..c {
                if xd[ia + ci] >= xd[ib + ci] {
                    dx[ia + ci] = dx[ia + ci] + g[ci];
                } else {
                    dx[ib + ci] = dx[ib + ci] + g[ci];
                }
            }
        }
    }
    Tensor::new(x.shape(), dx)
}

/// Max pool on `[B, C, L]`.
pub fn maxpool1d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    nlc_to_ncl(&maxpool2_rlc_forward(&ncl_to_nlc(x)))
}

/// Mean over the length axis: `[R, L, C]` -> `[R, C]`.
pub fn global_avg_pool_rlc_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, l, c) = dims3(x);
    let xd = x.data();
    let inv = T::from_f64(1.0 / l as f64);
    let mut y = vec![T::zero(); r * c];
    for ri in 0..r {
        let out = &mut y[ri * c..(ri + 1) * c];
        for li in 0..l {
            let row = &xd[(ri * l + li) * c..(ri * l + li + 1) * c];
            for ci in 0..c {
                out[ci] = out[ci] + row[ci];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor::new(&[r, c], y)
}

pub fn global_avg_pool_rlc_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (r, l, c) = (x_shape[0], x_shape[1], x_shape[2]);
    let dyd = dy.data();
    let inv = T::from_f64(1.0 / l as f64);
    let mut dx = vec![T::zero(); r * l * c];
    for ri in 0..r {
        let g = &dyd[ri * c..(ri + 1) * c];
        for li in 0..l {
            let out = &mut dx[(ri * l + li) * c..(ri * l + li + 1) * c];
            for ci in 0..c {
                out[ci] = g[ci] * inv;
            }
        }
    }
    Tensor::new(x_shape, dx)
}

/// Adaptive average pooling on `[B, C, L]` -> `[B, C]`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    global_avg_pool_rlc_forward(&ncl_to_nlc(x))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x · W^T + b over the last axis; `x: [..., d_in]`, `w: [d_out, d_in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let d_in = *x.shape().last().expect("linear on 0-d tensor");
    let (d_out, wd_in) = (w.shape()[0], w.shape()[1]);
    assert_eq!(d_in, wd_in, "linear: input dim {d_in} vs weight dim {wd_in}");
    assert_eq!(b.numel(), d_out);
    let m = x.numel() / d_in;
    let mut y = vec![T::zero(); m * d_out];
    // x (m×k) · W^T (k×n) via strides on W.
    let chunk = GEMM_CHUNK;
    y.par_chunks_mut(chunk * d_out).enumerate().for_each(|(ci, yc)| {
        let row0 = ci * chunk;
        let rows = yc.len() / d_out;
        T::gemm_strided(
            rows, d_in, d_out, T::one(),
            &x.data()[row0 * d_in..], d_in as isize, 1,
            w.data(), 1, d_in as isize,
            T::zero(),
            yc, d_out as isize, 1,
        );
    });
    let bd = b.data();
    y.par_chunks_mut(d_out).for_each(|row| {
        for (v, bias) in row.iter_mut().zip(bd) {
            *v = *v + *bias;
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d_in = *x.shape().last().unwrap();
    let d_out = w.shape()[0];
    let m = x.numel() / d_in;
    let dyd = dy.data();

    let mut db = vec![T::zero(); d_out];
    for row in dyd.chunks_exact(d_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }

    // dX = dY (m×n) · W (n×k)
    let mut dx = vec![T::zero(); m * d_in];
    par_gemm(m, d_out, d_in, dyd, w.data(), &mut dx);

    // dW = dY^T (n×m) · X (m×k), chunked deterministically over m.
    let n_chunks = m.div_ceil(GEMM_CHUNK);
    let partials: Vec<Vec<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let row0 = chunk * GEMM_CHUNK;
            let rows = GEMM_CHUNK.min(m - row0);
            let mut dw = vec![T::zero(); d_out * d_in];
            T::gemm_strided(
                d_out, rows, d_in, T::one(),
                &dyd[row0 * d_out..], 1, d_out as isize,
                &x.data()[row0 * d_in..], d_in as isize, 1,
                T::zero(),
                &mut dw, d_in as isize, 1,
            );
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); d_out * d_in];
    for part in &partials {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }

    (Tensor::new(x.shape(), dx), Tensor::new(w.shape(), dw), Tensor::new(&[d_out], db))
}

// ---------------------------------------------------------------------------
// Softmax / LayerNorm over the last axis
// ---------------------------------------------------------------------------

pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax on 0-d tensor");
    let mut y = vec![T::zero(); x.numel()];
    y.chunks_exact_mut(d).zip(x.data().chunks_exact(d)).for_each(|(yrow, xrow)| {
        let mut max = xrow[0];
        for &v in xrow {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (yv, &xv) in yrow.iter_mut().zip(xrow) {
            let e = (xv - max).exp();
            *yv = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for yv in yrow.iter_mut() {
            *yv = *yv * inv;
        }
    });
    Tensor::new(x.shape(), y)
}

/// Backward given the forward output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let mut dx = vec![T::zero(); y.numel()];
    dx.chunks_exact_mut(d)
        .zip(y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)))
        .for_each(|(dxrow, (yrow, dyrow))| {
            let mut dot = T::zero();
            for (yv, dv) in yrow.iter().zip(dyrow) {
                dot = dot + *yv * *dv;
            }
            for ci in 0..d {
                dxrow[ci] = yrow[ci] * (dyrow[ci] - dot);
            }
        });
    Tensor::new(y.shape(), dx)
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Layer norm over the last axis with affine parameters.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, LnCache<T>) {
    let d = *x.shape().last().expect("layer_norm on 0-d tensor");
    assert_eq!(gamma.numel(), d);
    assert_eq!(beta.numel(), d);
    let rows = x.numel() / d;
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![T::zero(); x.numel()];
    let mut mean = vec![T::zero(); rows];
    let mut inv_std = vec![T::zero(); rows];
    for (ri, (yrow, xrow)) in y.chunks_exact_mut(d).zip(x.data().chunks_exact(d)).enumerate() {
        let mut s = 0.0f64;
        let mut sq = 0.0f64;
        for &v in xrow {
            let vf = v.as_f64();
            s += vf;
            sq += vf * vf;
        }
        let m = s / d as f64;
        let var = (sq / d as f64 - m * m).max(0.0);
        let is = 1.0 / (var + eps).sqrt();
        mean[ri] = T::from_f64(m);
        inv_std[ri] = T::from_f64(is);
        for ci in 0..d {
            let xhat = (xrow[ci] - mean[ri]) * inv_std[ri];
            yrow[ci] = gd[ci] * xhat + bd[ci];
        }
    }
    (Tensor::new(x.shape(), y), LnCache { mean, inv_std })
}

pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LnCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let gd = gamma.data();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for ri in 0..rows {
        let xrow = &x.data()[ri * d..(ri + 1) * d];
        let dyrow = &dy.data()[ri * d..(ri + 1) * d];
        let dxrow = &mut dx[ri * d..(ri + 1) * d];
        let is = cache.inv_std[ri].as_f64();
        let mu = cache.mean[ri].as_f64();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for ci in 0..d {
            let xhat = (xrow[ci].as_f64() - mu) * is;
            let dyv = dyrow[ci].as_f64();
            dgamma[ci] += dyv * xhat;
            dbeta[ci] += dyv;
            let g = dyv * gd[ci].as_f64();
            sum_g += g;
            sum_gx += g * xhat;
        }
        let dn = d as f64;
        for ci in 0..d {
            let xhat = (xrow[ci].as_f64() - mu) * is;
            let g = dyrow[ci].as_f64() * gd[ci].as_f64();
            dxrow[ci] = T::from_f64(is * (g - sum_g / dn - xhat * sum_gx / dn));
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[d], dgamma.into_iter().map(T::from_f64).collect()),
        Tensor::new(&[d], dbeta.into_iter().map(T::from_f64).collect()),
    )
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Train-mode dropout: zero with probability `p`, scale survivors by
/// 1/(1-p). Returns the keep mask for backward.
pub fn dropout_forward<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut crate::rng::RngStream) -> (Tensor<T>, Vec<u8>) {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut mask = vec![0u8; x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for i in 0..x.numel() {
        if rng.uniform() >= p {
            mask[i] = 1;
            y[i] = x.data()[i] * scale;
        }
    }
    (Tensor::new(x.shape(), y), mask)
}

pub fn dropout_backward<T: Scalar>(mask: &[u8], p: f64, dy: &Tensor<T>) -> Tensor<T> {
    let scale = T::from_f64(1.0 / (1.0 - p));
    let data = dy
        .data()
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m == 1 { d * scale } else { T::zero() })
        .collect();
    Tensor::new(dy.shape(), data)
}

// ---------------------------------------------------------------------------
// Attention building blocks
// ---------------------------------------------------------------------------

/// `[B, S, h*dh]` -> `[B, h, S, dh]`
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (b, s, d) = dims3(x);
    assert_eq!(d % heads, 0, "embedding dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let src = (bi * s + si) * d + h * dh;
                let dst = ((bi * heads + h) * s + si) * dh;
                y[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
            }
        }
    }
    Tensor::new(&[b, heads, s, dh], y)
}

/// `[B, h, S, dh]` -> `[B, S, h*dh]`
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4);
    let (b, heads, s, dh) = (sh[0], sh[1], sh[2], sh[3]);
    let xd = x.data();
    let d = heads * dh;
    let mut y = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let src = ((bi * heads + h) * s + si) * dh;
                let dst = (bi * s + si) * d + h * dh;
                y[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
            }
        }
    }
    Tensor::new(&[b, s, d], y)
}

/// Batched matmul over leading group dims: `a: [..., m, k]` with
/// `b: [..., k, n]` (or `[..., n, k]` when `transpose_b`), scaled by `scale`.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool, scale: T) -> Tensor<T> {
    let ash = a.shape();
    let bsh = b.shape();
    assert!(ash.len() >= 2 && ash.len() == bsh.len());
    let g: usize = ash[..ash.len() - 2].iter().product();
    let gb: usize = bsh[..bsh.len() - 2].iter().product();
    assert_eq!(g, gb, "batched_matmul group mismatch");
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (n, kb) = if transpose_b {
        (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
    } else {
        (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
    };
    assert_eq!(k, kb, "batched_matmul inner dim mismatch");

    let mut y = vec![T::zero(); g * m * n];
    y.par_chunks_mut(m * n).enumerate().for_each(|(gi, yc)| {
        let av = &a.data()[gi * m * k..(gi + 1) * m * k];
        let bv = &b.data()[gi * k * n..(gi + 1) * k * n];
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm_strided(
            m, k, n, scale,
            av, k as isize, 1,
            bv, rsb, csb,
            T::zero(),
            yc, n as isize, 1,
        );
    });
    let mut shape = ash[..ash.len() - 2].to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::new(&shape, y)
}

/// Gradients of [`batched_matmul`] with respect to both operands.
pub fn batched_matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
    scale: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ash = a.shape();
    let bsh = b.shape();
    let g: usize = ash[..ash.len() - 2].iter().product();
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = dy.shape()[dy.shape().len() - 1];

    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    da.par_chunks_mut(m * k)
        .zip(db.par_chunks_mut(b.numel() / g))
        .enumerate()
        .for_each(|(gi, (dac, dbc))| {
            let av = &a.data()[gi * m * k..(gi + 1) * m * k];
            let bv = &b.data()[gi * (b.numel() / g)..(gi + 1) * (b.numel() / g)];
            let dyv = &dy.data()[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                // y = s·A·B^T (B is n×k): dA = s·dY·B ; dB = s·dY^T·A
                T::gemm_strided(
                    m, n, k, scale,
                    dyv, n as isize, 1,
                    bv, k as isize, 1,
                    T::zero(),
                    dac, k as isize, 1,
                );
                T::gemm_strided(
                    n, m, k, scale,
                    dyv, 1, n as isize,
                    av, k as isize, 1,
                    T::zero(),
                    dbc, k as isize, 1,
                );
            } else {
                // y = s·A·B (B is k×n): dA = s·dY·B^T ; dB = s·A^T·dY
                T::gemm_strided(
                    m, n, k, scale,
                    dyv, n as isize, 1,
                    bv, 1, n as isize,
                    T::zero(),
                    dac, k as isize, 1,
                );
                T::gemm_strided(
                    k, m, n, scale,
                    av, 1, k as isize,
                    dyv, n as isize, 1,
                    T::zero(),
                    dbc, n as isize, 1,
                );
            }
        });
    (Tensor::new(ash, da), Tensor::new(bsh, db))
}

/// Mean over axis 1 of `[B, S, D]` -> `[B, D]`.
pub fn mean_axis1_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, s, d) = dims3(x);
    let inv = T::from_f64(1.0 / s as f64);
    let xd = x.data();
    let mut y = vec![T::zero(); b * d];
    for bi in 0..b {
        let out = &mut y[bi * d..(bi + 1) * d];
        for si in 0..s {
            let row = &xd[(bi * s + si) * d..(bi * s + si + 1) * d];
            for ci in 0..d {
                out[ci] = out[ci] + row[ci];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
    }
    Tensor::new(&[b, d], y)
}

pub fn mean_axis1_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, s, d) = (x_shape[0], x_shape[1], x_shape[2]);
    let inv = T::from_f64(1.0 / s as f64);
    let mut dx = vec![T::zero(); b * s * d];
    for bi in 0..b {
        let g = &dy.data()[bi * d..(bi + 1) * d];
        for si in 0..s {
            let out = &mut dx[(bi * s + si) * d..(bi * s + si + 1) * d];
            for ci in 0..d {
                out[ci] = g[ci] * inv;
            }
        }
    }
    Tensor::new(x_shape, dx)
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal positional table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`. Requires even `d`.
pub fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    assert!(d % 2 == 0, "positional encoding dimension must be even, got {d}");
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::from_f64(angle.sin());
            data[pos * d + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(&[n, d], data)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Weighted cross entropy over logits `[B, C]` via the log-sum-exp form.
/// Returns the scalar loss and the softmax probabilities (kept for backward).
pub fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    class_weights: &[T],
) -> (T, Tensor<T>) {
    let c = *logits.shape().last().expect("empty logits");
    let b = logits.numel() / c;
    assert_eq!(targets.len(), b, "target count mismatch");
    assert_eq!(class_weights.len(), c, "class weight count mismatch");
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < c, "target {t} out of range for {c} classes (sample {i})");
    }
    let probs = softmax_forward(logits);
    let mut loss = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v - max).as_f64().exp();
        }
        let lse = max.as_f64() + sum.ln();
        loss += class_weights[t].as_f64() * (lse - row[t].as_f64());
    }
    (T::from_f64(loss / b as f64), probs)
}

/// d(loss)/d(logits) given the cached probabilities.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    class_weights: &[T],
    upstream: T,
) -> Tensor<T> {
    let c = *probs.shape().last().unwrap();
    let b = probs.numel() / c;
    let scale = upstream * T::from_f64(1.0 / b as f64);
    let mut dz = vec![T::zero(); probs.numel()];
    for (i, &t) in targets.iter().enumerate() {
        let w = class_weights[t] * scale;
        let prow = &probs.data()[i * c..(i + 1) * c];
        let drow = &mut dz[i * c..(i + 1) * c];
        for ci in 0..c {
            let delta = if ci == t { T::one() } else { T::zero() };
            drow[ci] = w * (prow[ci] - delta);
        }
    }
    Tensor::new(probs.shape(), dz)
}

/// λ·Σ|w| over a set of tensors.
pub fn l1_penalty_value<T: Scalar>(tensors: &[&Tensor<T>], lambda: T) -> T {
    let mut total = T::zero();
    for t in tensors {
        for &v in t.data() {
            total = total + v.abs();
        }
    }
    lambda * total
}

/// Subgradient of the L1 penalty: λ·sign(w), zero at w = 0.
pub fn l1_penalty_grad<T: Scalar>(t: &Tensor<T>, lambda: T, upstream: T) -> Tensor<T> {
    let s = lambda * upstream;
    t.map(|v| {
        if v > T::zero() {
            s
        } else if v < T::zero() {
            T::zero() - s
        } else {
            T::zero()
        }
    })
}
