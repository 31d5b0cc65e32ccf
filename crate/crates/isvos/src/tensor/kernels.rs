//! Raw numeric kernels shared by the tape ops and the standalone matching
//! functions. All reductions accumulate in f64 and round to f32 once at the
//! end; loops write disjoint output rows so the rayon paths stay bitwise
//! deterministic for any thread count.

use rayon::prelude::*;
use std::sync::OnceLock;

/// Below this many multiply-accumulates a kernel stays sequential.
const PAR_THRESHOLD: usize = 1 << 16;

/// Builds the global rayon pool once, honoring `ISVOS_THREADS`.
pub(crate) fn init_thread_pool() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        if let Some(n) = std::env::var("ISVOS_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    });
}

fn run_rows<F: Fn(usize, &mut [f32]) + Sync>(out: &mut [f32], row_len: usize, work: usize, f: F) {
    if work < PAR_THRESHOLD {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    } else {
        init_thread_pool();
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

// ---------------------------------------------------------------- matmul

pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    run_rows(&mut out, n, m * k * n, |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            *o = acc as f32;
        }
    });
    out
}

/// dA[i,p] = sum_j g[i,j] * b[p,j]
pub(crate) fn matmul_grad_a(g: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    run_rows(&mut out, k, m * k * n, |i, row| {
        for (p, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += g[i * n + j] as f64 * b[p * n + j] as f64;
            }
            *o = acc as f32;
        }
    });
    out
}

/// dB[p,j] = sum_i a[i,p] * g[i,j]
pub(crate) fn matmul_grad_b(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    run_rows(&mut out, n, m * k * n, |p, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += a[i * k + p] as f64 * g[i * n + j] as f64;
            }
            *o = acc as f32;
        }
    });
    out
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv2d(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let plane = d.h_out * d.w_out;
    let mut out = vec![0.0f32; d.c_out * plane];
    let work = d.c_out * plane * d.c_in * d.k * d.k;
    run_rows(&mut out, plane, work, |co, row| {
        let b = bias.map_or(0.0f64, |b| b[co] as f64);
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut acc = b;
                for ci in 0..d.c_in {
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = (ci * d.h + iy as usize) * d.w;
                        let wrow = ((co * d.c_in + ci) * d.k + ky) * d.k;
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] as f64 * w[wrow + kx] as f64;
                        }
                    }
                }
                row[oy * d.w_out + ox] = acc as f32;
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_x(gy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let plane = d.h * d.w;
    let mut out = vec![0.0f32; d.c_in * plane];
    let work = d.c_out * d.h_out * d.w_out * d.c_in * d.k * d.k;
    run_rows(&mut out, plane, work, |ci, row| {
        let mut acc = vec![0.0f64; plane];
        for co in 0..d.c_out {
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = w[((co * d.c_in + ci) * d.k + ky) * d.k + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let gr = (co * d.h_out + oy) * d.w_out;
                        let ar = iy as usize * d.w;
                        for ox in 0..d.w_out {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc[ar + ix as usize] += gy[gr + ox] as f64 * wv;
                        }
                    }
                }
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    out
}

pub(crate) fn conv2d_grad_w(x: &[f32], gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let block = d.c_in * d.k * d.k;
    let mut out = vec![0.0f32; d.c_out * block];
    let work = d.c_out * d.h_out * d.w_out * block;
    run_rows(&mut out, block, work, |co, row| {
        let mut acc = vec![0.0f64; block];
        for ci in 0..d.c_in {
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let mut s = 0.0f64;
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let gr = (co * d.h_out + oy) * d.w_out;
                        let xr = (ci * d.h + iy as usize) * d.w;
                        for ox in 0..d.w_out {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            s += gy[gr + ox] as f64 * x[xr + ix as usize] as f64;
                        }
                    }
                    acc[(ci * d.k + ky) * d.k + kx] = s;
                }
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    out
}

pub(crate) fn conv2d_grad_bias(gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let plane = d.h_out * d.w_out;
    (0..d.c_out)
        .map(|co| gy[co * plane..(co + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

// ------------------------------------------------------------- resampling

/// Source coordinate and interpolation weight for one output index under the
/// align-corners-false convention, clamped to the valid range.
#[inline]
fn resample_coord(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize of a `[C,H,W]` volume to `[C,OH,OW]`.
pub(crate) fn resample_bilinear(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let plane = oh * ow;
    let mut out = vec![0.0f32; c * plane];
    run_rows(&mut out, plane, c * plane * 4, |ch, row| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = resample_coord(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resample_coord(ox, sx, w);
                let v = (1.0 - fy) * (1.0 - fx) * src[y0 * w + x0] as f64
                    + (1.0 - fy) * fx * src[y0 * w + x1] as f64
                    + fy * (1.0 - fx) * src[y1 * w + x0] as f64
                    + fy * fx * src[y1 * w + x1] as f64;
                row[oy * ow + ox] = v as f32;
            }
        }
    });
    out
}

/// Adjoint of [`resample_bilinear`]: scatters the output gradient back.
pub(crate) fn resample_bilinear_grad(
    gy: &[f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    run_rows(&mut out, plane, c * oh * ow * 4, |ch, row| {
        let mut acc = vec![0.0f64; plane];
        let g = &gy[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = resample_coord(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resample_coord(ox, sx, w);
                let gv = g[oy * ow + ox] as f64;
                acc[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                acc[y0 * w + x1] += (1.0 - fy) * fx * gv;
                acc[y1 * w + x0] += fy * (1.0 - fx) * gv;
                acc[y1 * w + x1] += fy * fx * gv;
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    out
}

// -------------------------------------------------------- point sampling

/// Interpolation support of one normalized point: corner indices and weights.
/// (0,0) maps to pixel center (0,0), (1,1) to pixel center (H-1,W-1);
/// out-of-range coordinates clamp.
#[inline]
pub(crate) fn point_support(
    py: f32,
    px: f32,
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize, f64, f64) {
    let y = (py as f64).clamp(0.0, 1.0) * (h - 1) as f64;
    let x = (px as f64).clamp(0.0, 1.0) * (w - 1) as f64;
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    (y0, y1, x0, x1, y - y0 as f64, x - x0 as f64)
}

pub(crate) fn bilinear_sample(
    f: &[f32],
    c: usize,
    h: usize,
    w: usize,
    points: &[f32],
    p: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; p * c];
    run_rows(&mut out, c, p * c * 4, |i, row| {
        let (y0, y1, x0, x1, fy, fx) = point_support(points[2 * i], points[2 * i + 1], h, w);
        for (ch, o) in row.iter_mut().enumerate() {
            let base = ch * h * w;
            let v = (1.0 - fy) * (1.0 - fx) * f[base + y0 * w + x0] as f64
                + (1.0 - fy) * fx * f[base + y0 * w + x1] as f64
                + fy * (1.0 - fx) * f[base + y1 * w + x0] as f64
                + fy * fx * f[base + y1 * w + x1] as f64;
            *o = v as f32;
        }
    });
    out
}

/// Gradients of [`bilinear_sample`] w.r.t. the feature map and the points.
/// Clamped coordinates have zero point-gradient (the clamp is flat there).
pub(crate) fn bilinear_sample_grad(
    f: &[f32],
    c: usize,
    h: usize,
    w: usize,
    points: &[f32],
    p: usize,
    gy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut df = vec![0.0f64; c * h * w];
    let mut dp = vec![0.0f32; p * 2];
    for i in 0..p {
        let (py, px) = (points[2 * i], points[2 * i + 1]);
        let (y0, y1, x0, x1, fy, fx) = point_support(py, px, h, w);
        let mut dy_acc = 0.0f64;
        let mut dx_acc = 0.0f64;
        for ch in 0..c {
            let g = gy[i * c + ch] as f64;
            let base = ch * h * w;
            df[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            df[base + y0 * w + x1] += g * (1.0 - fy) * fx;
            df[base + y1 * w + x0] += g * fy * (1.0 - fx);
            df[base + y1 * w + x1] += g * fy * fx;
            let v00 = f[base + y0 * w + x0] as f64;
            let v01 = f[base + y0 * w + x1] as f64;
            let v10 = f[base + y1 * w + x0] as f64;
            let v11 = f[base + y1 * w + x1] as f64;
            dy_acc += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            dx_acc += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
        }
        if (0.0..=1.0).contains(&py) {
            dp[2 * i] = (dy_acc * (h - 1) as f64) as f32;
        }
        if (0.0..=1.0).contains(&px) {
            dp[2 * i + 1] = (dx_acc * (w - 1) as f64) as f32;
        }
    }
    (df.into_iter().map(|v| v as f32).collect(), dp)
}

// ---------------------------------------------------------------- softmax

/// Max-subtracted softmax along `axis` of an arbitrary-rank tensor.
pub(crate) fn softmax(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + inn;
            let mut max = f32::NEG_INFINITY;
            for i in 0..n {
                max = max.max(x[idx(i)]);
            }
            let mut z = 0.0f64;
            for i in 0..n {
                z += ((x[idx(i)] - max) as f64).exp();
            }
            for i in 0..n {
                out[idx(i)] = (((x[idx(i)] - max) as f64).exp() / z) as f32;
            }
        }
    }
    out
}

/// dx = y * (gy - sum(gy * y)) along the softmax axis.
pub(crate) fn softmax_grad(y: &[f32], gy: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; y.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + inn;
            let mut dot = 0.0f64;
            for i in 0..n {
                dot += gy[idx(i)] as f64 * y[idx(i)] as f64;
            }
            for i in 0..n {
                out[idx(i)] = (y[idx(i)] as f64 * (gy[idx(i)] as f64 - dot)) as f32;
            }
        }
    }
    out
}

// --------------------------------------------------------------- affinity

/// Negative squared L2 distance between every memory column and every query
/// column, normalized by sqrt(C_k), top-k filtered per query column, then
/// softmax over memory positions. Ties at the k-th score keep the lower
/// memory index.
pub(crate) fn affinity_topk(
    keys: &[f32],
    query: &[f32],
    ck: usize,
    m: usize,
    p: usize,
    topk: usize,
) -> Vec<f32> {
    let norm = (ck as f64).sqrt();
    let k = topk.min(m);
    let mut out = vec![0.0f32; m * p];
    let cols: Vec<Vec<(usize, f64)>> = {
        let compute_col = |j: usize| -> Vec<(usize, f64)> {
            let mut scores: Vec<(usize, f64)> = (0..m)
                .map(|i| {
                    let mut d2 = 0.0f64;
                    for c in 0..ck {
                        let diff = keys[c * m + i] as f64 - query[c * p + j] as f64;
                        d2 += diff * diff;
                    }
                    (i, -d2 / norm)
                })
                .collect();
            // retain the k best; stable order favors the lower index on ties
            scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scores.truncate(k);
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, s| a.max(s.1));
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            scores.into_iter().map(|(i, s)| (i, (s - max).exp() / z)).collect()
        };
        if m * p * ck < PAR_THRESHOLD {
            (0..p).map(compute_col).collect()
        } else {
            init_thread_pool();
            (0..p).into_par_iter().map(compute_col).collect()
        }
    };
    for (j, col) in cols.iter().enumerate() {
        for &(i, wgt) in col {
            out[i * p + j] = wgt as f32;
        }
    }
    out
}

/// Gradients of [`affinity_topk`] w.r.t. keys and query. Excluded entries
/// carry exactly zero weight, so iterating over all of `a` is correct.
pub(crate) fn affinity_topk_grad(
    keys: &[f32],
    query: &[f32],
    a: &[f32],
    gy: &[f32],
    ck: usize,
    m: usize,
    p: usize,
) -> (Vec<f32>, Vec<f32>) {
    let norm = (ck as f64).sqrt();
    let mut dk = vec![0.0f64; ck * m];
    let mut dq = vec![0.0f64; ck * p];
    for j in 0..p {
        let mut dot = 0.0f64;
        for i in 0..m {
            dot += gy[i * p + j] as f64 * a[i * p + j] as f64;
        }
        for i in 0..m {
            let w = a[i * p + j] as f64;
            if w == 0.0 {
                continue;
            }
            let ds = w * (gy[i * p + j] as f64 - dot);
            let coeff = -2.0 * ds / norm;
            for c in 0..ck {
                let diff = keys[c * m + i] as f64 - query[c * p + j] as f64;
                dk[c * m + i] += coeff * diff;
                dq[c * p + j] -= coeff * diff;
            }
        }
    }
    (
        dk.into_iter().map(|v| v as f32).collect(),
        dq.into_iter().map(|v| v as f32).collect(),
    )
}
