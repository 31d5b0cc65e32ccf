//! The fixed op set: forward methods on [`Tape`] plus the matching backward
//! rules. Shape errors are reported before any compute runs; every op output
//! is scanned for non-finite values.

use super::kernels::{self, ConvDims};
use super::tape::{accumulate, BackOp, Node, Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Probability clamp for the multi-object aggregation.
const PROB_EPS: f64 = 1e-5;
/// Clamp for the aggregated background product.
const BG_EPS: f64 = 1e-7;
/// Floor inside log() of the bootstrapped cross entropy.
const LOG_FLOOR: f64 = 1e-12;

impl Tape {
    // ------------------------------------------------------------ linear

    /// `a[M,K] x b[K,N] -> [M,N]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let tr = self.tracked(&[a, b]);
        self.push("matmul", vec![m, n], out, tr, BackOp::Matmul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dimension("transpose", format!("expected rank 2, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tr = self.tracked(&[x]);
        self.push("transpose", vec![n, m], out, tr, BackOp::Transpose { x, m, n })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.numel(x) {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} cannot be viewed as {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        let tr = self.tracked(&[x]);
        self.push("reshape", shape.to_vec(), data, tr, BackOp::Reshape { x })
    }

    // ------------------------------------------------------- elementwise

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, BackOp::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, BackOp::Mul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f32, f32) -> f32,
        op: BackOp,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(
                name,
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        // combining scalars (e.g. summing losses) keeps the f64 shadow alive
        let shadow = if out.len() == 1 {
            Some(match name {
                "add" => self.scalar_value(a) + self.scalar_value(b),
                _ => self.scalar_value(a) * self.scalar_value(b),
            })
        } else {
            None
        };
        let tr = self.tracked(&[a, b]);
        self.push_shadowed(name, shape, out, shadow, tr, op)
    }

    /// `mul * x + add`, elementwise with scalars.
    pub fn affine(&mut self, x: TensorId, mul: f32, add: f32) -> Result<TensorId> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let shadow = if out.len() == 1 {
            Some(mul as f64 * self.scalar_value(x) + add as f64)
        } else {
            None
        };
        let tr = self.tracked(&[x]);
        self.push_shadowed("affine", shape, out, shadow, tr, BackOp::Affine { x, mul })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let tr = self.tracked(&[x]);
        self.push("relu", shape, out, tr, BackOp::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
            .collect();
        let shape = self.shape(x).to_vec();
        let tr = self.tracked(&[x]);
        self.push("sigmoid", shape, out, tr, BackOp::Sigmoid { x })
    }

    // ----------------------------------------------------- restructuring

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dimension("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dimension(
                    "concat",
                    format!("shape {:?} differs from {:?} off axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let meta: Vec<(TensorId, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        let tr = self.tracked(parts);
        self.push(
            "concat",
            shape,
            out,
            tr,
            BackOp::Concat {
                parts: meta,
                outer,
                inner,
            },
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::dimension(
                "narrow",
                format!("[{start}, {start}+{len}) along axis {axis} of {:?}", s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis];
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data(x);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let tr = self.tracked(&[x]);
        self.push(
            "narrow",
            shape,
            out,
            tr,
            BackOp::Narrow {
                x,
                outer,
                inner,
                full,
                start,
                len,
            },
        )
    }

    // --------------------------------------------------------- reductions

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dimension("softmax", format!("axis {} of {:?}", axis, s)));
        }
        let out = kernels::softmax(self.data(x), &s, axis);
        let tr = self.tracked(&[x]);
        self.push("softmax", s, out, tr, BackOp::Softmax { x, axis })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.data(x).iter().map(|&a| a as f64).sum::<f64>();
        let tr = self.tracked(&[x]);
        self.push_scalar("sum_all", v, tr, BackOp::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.numel(x) as f64;
        let v = self.data(x).iter().map(|&a| a as f64).sum::<f64>() / n;
        let tr = self.tracked(&[x]);
        self.push_scalar("mean_all", v, tr, BackOp::MeanAll { x })
    }

    /// `[C,H,W] -> [C]` mean over the spatial plane.
    pub fn spatial_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("spatial_mean", x)?;
        let src = self.data(x);
        let out: Vec<f32> = (0..c)
            .map(|ch| {
                (src[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
                    as f32
            })
            .collect();
        let tr = self.tracked(&[x]);
        self.push("spatial_mean", vec![c], out, tr, BackOp::SpatialMean { x, c, hw })
    }

    /// `[C,H,W] -> [C]` max over the spatial plane (first index wins ties).
    pub fn spatial_max(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("spatial_max", x)?;
        let src = self.data(x);
        let mut out = vec![0.0f32; c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let (mut best, mut bi) = (plane[0], 0);
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out[ch] = best;
            argmax[ch] = ch * hw + bi;
        }
        let tr = self.tracked(&[x]);
        self.push("spatial_max", vec![c], out, tr, BackOp::SpatialMax { x, hw, argmax })
    }

    /// `[C,H,W] -> [1,H,W]` mean across channels.
    pub fn channel_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("channel_mean", x)?;
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        let src = self.data(x);
        let out: Vec<f32> = (0..hw)
            .map(|i| ((0..c).map(|ch| src[ch * hw + i] as f64).sum::<f64>() / c as f64) as f32)
            .collect();
        let tr = self.tracked(&[x]);
        self.push("channel_mean", vec![1, h, w], out, tr, BackOp::ChannelMean { x, c, hw })
    }

    /// `[C,H,W] -> [1,H,W]` max across channels (first channel wins ties).
    pub fn channel_max(&mut self, x: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("channel_max", x)?;
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        let src = self.data(x);
        let mut out = vec![0.0f32; hw];
        let mut argmax = vec![0usize; hw];
        for i in 0..hw {
            let (mut best, mut bc) = (src[i], 0);
            for ch in 1..c {
                let v = src[ch * hw + i];
                if v > best {
                    best = v;
                    bc = ch;
                }
            }
            out[i] = best;
            argmax[i] = bc * hw + i;
        }
        let tr = self.tracked(&[x]);
        self.push("channel_max", vec![1, h, w], out, tr, BackOp::ChannelMax { x, hw, argmax })
    }

    fn chw(&self, op: &'static str, x: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dimension(op, format!("expected [C,H,W], got {:?}", s)));
        }
        Ok((s[0], s[1] * s[2]))
    }

    // --------------------------------------------------------- broadcasts

    /// `x[R,C] + b[C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dimension(
                "add_row_bias",
                format!("{:?} + {:?}", sx, sb),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bias = self.data(b);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % cols])
            .collect();
        let tr = self.tracked(&[x, b]);
        self.push(
            "add_row_bias",
            vec![rows, cols],
            out,
            tr,
            BackOp::AddRowBias { x, b, rows, cols },
        )
    }

    /// `x[C,H,W] * s[C]` per-channel scaling.
    pub fn mul_channel(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("mul_channel", x)?;
        if self.shape(s) != [c] {
            return Err(Error::dimension(
                "mul_channel",
                format!("scale {:?} for {:?}", self.shape(s), self.shape(x)),
            ));
        }
        let scale = self.data(s);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / hw])
            .collect();
        let shape = self.shape(x).to_vec();
        let tr = self.tracked(&[x, s]);
        self.push("mul_channel", shape, out, tr, BackOp::MulChannel { x, s, c, hw })
    }

    /// `x[C,H,W] * m[1,H,W]` per-position scaling.
    pub fn mul_spatial(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (c, hw) = self.chw("mul_spatial", x)?;
        let sm = self.shape(m);
        if sm.len() != 3 || sm[0] != 1 || sm[1] * sm[2] != hw {
            return Err(Error::dimension(
                "mul_spatial",
                format!("mask {:?} for {:?}", sm, self.shape(x)),
            ));
        }
        let mask = self.data(m);
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i % hw])
            .collect();
        let shape = self.shape(x).to_vec();
        let tr = self.tracked(&[x, m]);
        self.push("mul_spatial", shape, out, tr, BackOp::MulSpatial { x, m, c, hw })
    }

    // ------------------------------------------------------- convolution

    /// Cross-correlation of `x[C_in,H,W]` with `w[C_out,C_in,k,k]`, zero
    /// padding, optional bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("input {:?}, weight {:?}", sx, sw),
            ));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if sw[1] != c_in || sw[3] != k || k % 2 == 0 || stride == 0 {
            return Err(Error::dimension(
                "conv2d",
                format!("weight {:?} incompatible with input {:?} (odd k required)", sw, sx),
            ));
        }
        if h + 2 * pad < k
            || wd + 2 * pad < k
            || (h + 2 * pad - k) % stride != 0
            || (wd + 2 * pad - k) % stride != 0
        {
            return Err(Error::dimension(
                "conv2d",
                format!("non-integral output size for {}x{} k={} stride={} pad={}", h, wd, k, stride, pad),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::dimension(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), c_out),
                ));
            }
        }
        let dims = ConvDims {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d(self.data(x), self.data(w), bias.map(|b| self.data(b)), &dims);
        let mut ids = vec![x, w];
        ids.extend(bias);
        let tr = self.tracked(&ids);
        self.push(
            "conv2d",
            vec![c_out, dims.h_out, dims.w_out],
            out,
            tr,
            BackOp::Conv2d { x, w, bias, dims },
        )
    }

    // -------------------------------------------------------- resampling

    /// Bilinear upsampling by an integer factor, align-corners-false.
    pub fn upsample_bilinear(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be >= 1".into()));
        }
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dimension("upsample_bilinear", format!("expected [C,H,W], got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// Bilinear resize to an arbitrary spatial extent, align-corners-false.
    pub fn resize_bilinear(&mut self, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(Error::dimension(
                "resize_bilinear",
                format!("{:?} to {}x{}", s, oh, ow),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::resample_bilinear(self.data(x), c, h, w, oh, ow);
        let tr = self.tracked(&[x]);
        self.push(
            "resize_bilinear",
            vec![c, oh, ow],
            out,
            tr,
            BackOp::Upsample { x, c, h, w, oh, ow },
        )
    }

    /// Samples `f[C,H,W]` at `points[P,2]` (row, col) normalized to `[0,1]`,
    /// returning `[P,C]`. Differentiable in both arguments.
    pub fn bilinear_sample(&mut self, f: TensorId, points: TensorId) -> Result<TensorId> {
        let (sf, sp) = (self.shape(f), self.shape(points));
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::dimension(
                "bilinear_sample",
                format!("feature {:?}, points {:?}", sf, sp),
            ));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let p = sp[0];
        let out = kernels::bilinear_sample(self.data(f), c, h, w, self.data(points), p);
        let tr = self.tracked(&[f, points]);
        self.push(
            "bilinear_sample",
            vec![p, c],
            out,
            tr,
            BackOp::BilinearSample { f, points, c, h, w, p },
        )
    }

    // ------------------------------------------------------ fused kernels

    /// Memory affinity: keys `[C_k,M]`, query `[C_k,P]`, softmax over memory
    /// positions after per-column top-k filtering of raw scores.
    pub fn affinity_topk(&mut self, keys: TensorId, query: TensorId, topk: usize) -> Result<TensorId> {
        if topk == 0 {
            return Err(Error::Contract("topk must be >= 1".into()));
        }
        let (sk, sq) = (self.shape(keys), self.shape(query));
        if sk.len() != 2 || sq.len() != 2 || sk[0] != sq[0] {
            return Err(Error::dimension(
                "affinity_topk",
                format!("keys {:?} vs query {:?}", sk, sq),
            ));
        }
        let (ck, m, p) = (sk[0], sk[1], sq[1]);
        if m == 0 {
            return Err(Error::State("affinity over an empty memory".into()));
        }
        let out = kernels::affinity_topk(self.data(keys), self.data(query), ck, m, p, topk);
        let tr = self.tracked(&[keys, query]);
        self.push(
            "affinity_topk",
            vec![m, p],
            out,
            tr,
            BackOp::AffinityTopk { keys, query, ck, m, p },
        )
    }

    /// Smoothed dice loss between predicted probabilities and a binary mask;
    /// value in [0,1).
    pub fn dice_loss(&mut self, pred: TensorId, gt: &Tensor) -> Result<TensorId> {
        if self.numel(pred) != gt.numel() {
            return Err(Error::dimension(
                "dice_loss",
                format!("{:?} vs {:?}", self.shape(pred), gt.shape()),
            ));
        }
        let p = self.data(pred);
        let g = gt.data();
        let mut sum_p = 0.0f64;
        let mut sum_g = 0.0f64;
        let mut sum_pg = 0.0f64;
        for (&pv, &gv) in p.iter().zip(g) {
            sum_p += pv as f64;
            sum_g += gv as f64;
            sum_pg += pv as f64 * gv as f64;
        }
        let v = 1.0 - (2.0 * sum_pg + 1.0) / (sum_p + sum_g + 1.0);
        let tr = self.tracked(&[pred]);
        self.push_scalar(
            "dice_loss",
            v,
            tr,
            BackOp::Dice {
                pred,
                gt: g.to_vec(),
                sum_p,
                sum_g,
                sum_pg,
            },
        )
    }

    /// Binary cross entropy on logits with foreground/background class-balance
    /// weights computed from the target mask; mean weight is exactly 1 when
    /// both classes are present, and uniform 1 otherwise.
    pub fn weighted_bce_with_logits(&mut self, logits: TensorId, gt: &Tensor) -> Result<TensorId> {
        if self.numel(logits) != gt.numel() {
            return Err(Error::dimension(
                "weighted_bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), gt.shape()),
            ));
        }
        let n = gt.numel() as f64;
        let n_fg = gt.data().iter().filter(|&&v| v > 0.5).count() as f64;
        let n_bg = n - n_fg;
        let (w_fg, w_bg) = if n_fg > 0.0 && n_bg > 0.0 {
            (n / (2.0 * n_fg), n / (2.0 * n_bg))
        } else {
            (1.0, 1.0)
        };
        let mut acc = 0.0f64;
        for (&x, &z) in self.data(logits).iter().zip(gt.data()) {
            let x = x as f64;
            let z = z as f64;
            let w = if z > 0.5 { w_fg } else { w_bg };
            acc += w * (x.max(0.0) - x * z + (-x.abs()).exp().ln_1p());
        }
        let tr = self.tracked(&[logits]);
        self.push_scalar(
            "weighted_bce_with_logits",
            acc / n,
            tr,
            BackOp::WeightedBce {
                logits,
                gt: gt.data().to_vec(),
                w_fg,
                w_bg,
            },
        )
    }

    /// Softmax cross entropy over the rows of `logits[N,C]`, one target class
    /// per row, averaged with per-class weights (weighted mean).
    pub fn softmax_ce_rows(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        class_weights: &[f32],
    ) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dimension(
                "softmax_ce_rows",
                format!("logits {:?} with {} targets", s, targets.len()),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        if class_weights.len() != cols || targets.iter().any(|&t| t >= cols) {
            return Err(Error::Contract("target class out of range".into()));
        }
        let z = self.data(logits);
        let mut acc = 0.0f64;
        let mut weight_sum = 0.0f64;
        let mut row_weights = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &z[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            let w = class_weights[targets[r]] as f64;
            row_weights[r] = w as f32;
            weight_sum += w;
            acc += w * (lse - row[targets[r]] as f64);
        }
        let tr = self.tracked(&[logits]);
        self.push_scalar(
            "softmax_ce_rows",
            acc / weight_sum.max(f64::MIN_POSITIVE),
            tr,
            BackOp::SoftmaxCeRows {
                logits,
                targets: targets.to_vec(),
                row_weights,
                weight_sum,
            },
        )
    }

    /// Per-pixel cross entropy against integer labels over `dist[C,P]`
    /// (columns are pixels), averaged over only the hardest
    /// `ceil(ratio * P)` pixels. `ratio = 1` is the plain mean.
    pub fn bootstrapped_ce(&mut self, dist: TensorId, labels: &[usize], ratio: f32) -> Result<TensorId> {
        if !(0.0..=1.0).contains(&ratio) || ratio <= 0.0 {
            return Err(Error::Contract(format!("bootstrap ratio {} not in (0,1]", ratio)));
        }
        let s = self.shape(dist);
        if s.len() != 2 || s[1] != labels.len() {
            return Err(Error::dimension(
                "bootstrapped_ce",
                format!("dist {:?} with {} labels", s, labels.len()),
            ));
        }
        let (classes, pixels) = (s[0], s[1]);
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Contract("label out of range".into()));
        }
        let d = self.data(dist);
        let mut ce: Vec<(usize, f64)> = (0..pixels)
            .map(|p| (p, -((d[labels[p] * pixels + p] as f64).max(LOG_FLOOR)).ln()))
            .collect();
        let count = ((ratio as f64 * pixels as f64).ceil() as usize).clamp(1, pixels);
        ce.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ce.truncate(count);
        let v = ce.iter().map(|&(_, l)| l).sum::<f64>() / count as f64;
        let selected = ce.into_iter().map(|(p, _)| p).collect();
        let tr = self.tracked(&[dist]);
        self.push_scalar(
            "bootstrapped_ce",
            v,
            tr,
            BackOp::BootstrappedCe {
                dist,
                labels: labels.to_vec(),
                selected,
                cols: pixels,
            },
        )
    }

    /// Merges per-object probabilities `[K,P]` into a `[K+1,P]` distribution
    /// over background + objects via normalized odds: the background takes
    /// the product of complements, each entry converts to odds, and odds are
    /// renormalized per pixel. Row 0 is background.
    pub fn soft_aggregate(&mut self, probs: TensorId) -> Result<TensorId> {
        let s = self.shape(probs);
        if s.len() != 2 {
            return Err(Error::dimension(
                "soft_aggregate",
                format!("expected [K,P], got {:?}", s),
            ));
        }
        let (objects, pixels) = (s[0], s[1]);
        if objects == 0 {
            return Err(Error::Contract("soft_aggregate needs at least one object".into()));
        }
        let d = self.data(probs);
        let mut out = vec![0.0f32; (objects + 1) * pixels];
        for j in 0..pixels {
            let mut bg = 1.0f64;
            for k in 0..objects {
                bg *= 1.0 - (d[k * pixels + j] as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
            }
            let bg = bg.clamp(BG_EPS, 1.0 - BG_EPS);
            let mut sum = bg / (1.0 - bg);
            out[j] = sum as f32;
            for k in 0..objects {
                let p = (d[k * pixels + j] as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
                let odds = p / (1.0 - p);
                out[(k + 1) * pixels + j] = odds as f32;
                sum += odds;
            }
            for k in 0..=objects {
                out[k * pixels + j] = (out[k * pixels + j] as f64 / sum) as f32;
            }
        }
        let tr = self.tracked(&[probs]);
        self.push(
            "soft_aggregate",
            vec![objects + 1, pixels],
            out,
            tr,
            BackOp::SoftAggregate {
                probs,
                objects,
                pixels,
            },
        )
    }
}

// ===================================================================
// backward rules
// ===================================================================

/// Propagates the gradient of one node into its inputs.
pub(crate) fn backward_step(before: &mut [Node], node: &Node) -> Result<()> {
    let g = node
        .grad
        .as_deref()
        .expect("backward_step called with gradient present");
    match &node.op {
        BackOp::Leaf => {}
        BackOp::Matmul { a, b, m, k, n } => {
            if before[*a].needs_grad {
                let da = kernels::matmul_grad_a(g, &before[*b].data, *m, *k, *n);
                accumulate(before, *a, &da);
            }
            if before[*b].needs_grad {
                let db = kernels::matmul_grad_b(&before[*a].data, g, *m, *k, *n);
                accumulate(before, *b, &db);
            }
        }
        BackOp::Transpose { x, m, n } => {
            // node is [n,m]; transpose the gradient back to [m,n]
            let mut dx = vec![0.0f32; m * n];
            for j in 0..*n {
                for i in 0..*m {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            accumulate(before, *x, &dx);
        }
        BackOp::Reshape { x } => accumulate(before, *x, g),
        BackOp::Add { a, b } => {
            accumulate(before, *a, g);
            accumulate(before, *b, g);
        }
        BackOp::Mul { a, b } => {
            if before[*a].needs_grad {
                let da: Vec<f32> = g.iter().zip(&before[*b].data).map(|(&gv, &bv)| gv * bv).collect();
                accumulate(before, *a, &da);
            }
            if before[*b].needs_grad {
                let db: Vec<f32> = g.iter().zip(&before[*a].data).map(|(&gv, &av)| gv * av).collect();
                accumulate(before, *b, &db);
            }
        }
        BackOp::Affine { x, mul } => {
            let dx: Vec<f32> = g.iter().map(|&gv| gv * mul).collect();
            accumulate(before, *x, &dx);
        }
        BackOp::Relu { x } => {
            let dx: Vec<f32> = g
                .iter()
                .zip(&before[*x].data)
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            accumulate(before, *x, &dx);
        }
        BackOp::Sigmoid { x } => {
            let dx: Vec<f32> = g
                .iter()
                .zip(&node.data)
                .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                .collect();
            accumulate(before, *x, &dx);
        }
        BackOp::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|&(_, l)| l).sum();
            for (pi, &(id, len)) in parts.iter().enumerate() {
                if !before[id].needs_grad {
                    continue;
                }
                let offset: usize = parts[..pi].iter().map(|&(_, l)| l).sum();
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    let base = (o * total + offset) * inner;
                    dx.extend_from_slice(&g[base..base + len * inner]);
                }
                accumulate(before, id, &dx);
            }
        }
        BackOp::Narrow {
            x,
            outer,
            inner,
            full,
            start,
            len,
        } => {
            let mut dx = vec![0.0f32; outer * full * inner];
            for o in 0..*outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(before, *x, &dx);
        }
        BackOp::Softmax { x, axis } => {
            let dx = kernels::softmax_grad(&node.data, g, &node.shape, *axis);
            accumulate(before, *x, &dx);
        }
        BackOp::Conv2d { x, w, bias, dims } => {
            if before[*x].needs_grad {
                let dx = kernels::conv2d_grad_x(g, &before[*w].data, dims);
                accumulate(before, *x, &dx);
            }
            if before[*w].needs_grad {
                let dw = kernels::conv2d_grad_w(&before[*x].data, g, dims);
                accumulate(before, *w, &dw);
            }
            if let Some(b) = bias {
                if before[*b].needs_grad {
                    let db = kernels::conv2d_grad_bias(g, dims);
                    accumulate(before, *b, &db);
                }
            }
        }
        BackOp::Upsample { x, c, h, w, oh, ow } => {
            let dx = kernels::resample_bilinear_grad(g, *c, *h, *w, *oh, *ow);
            accumulate(before, *x, &dx);
        }
        BackOp::BilinearSample { f, points, c, h, w, p } => {
            let (df, dp) =
                kernels::bilinear_sample_grad(&before[*f].data, *c, *h, *w, &before[*points].data, *p, g);
            accumulate(before, *f, &df);
            accumulate(before, *points, &dp);
        }
        BackOp::AddRowBias { x, b, rows, cols } => {
            accumulate(before, *x, g);
            if before[*b].needs_grad {
                let mut db = vec![0.0f64; *cols];
                for r in 0..*rows {
                    for (jc, dbv) in db.iter_mut().enumerate() {
                        *dbv += g[r * cols + jc] as f64;
                    }
                }
                let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                accumulate(before, *b, &db);
            }
        }
        BackOp::SpatialMean { x, c, hw } => {
            let mut dx = vec![0.0f32; c * hw];
            for ch in 0..*c {
                let gv = g[ch] / *hw as f32;
                dx[ch * hw..(ch + 1) * hw].fill(gv);
            }
            accumulate(before, *x, &dx);
        }
        BackOp::SpatialMax { x, hw, argmax } => {
            let mut dx = vec![0.0f32; argmax.len() * hw];
            for (ch, &idx) in argmax.iter().enumerate() {
                dx[idx] += g[ch];
            }
            accumulate(before, *x, &dx);
        }
        BackOp::ChannelMean { x, c, hw } => {
            let mut dx = vec![0.0f32; c * hw];
            for ch in 0..*c {
                for i in 0..*hw {
                    dx[ch * hw + i] = g[i] / *c as f32;
                }
            }
            accumulate(before, *x, &dx);
        }
        BackOp::ChannelMax { x, hw, argmax } => {
            let mut dx = vec![0.0f32; before[*x].data.len()];
            for (i, &idx) in argmax.iter().enumerate() {
                let _ = hw;
                dx[idx] += g[i];
            }
            accumulate(before, *x, &dx);
        }
        BackOp::MulChannel { x, s, c, hw } => {
            if before[*x].needs_grad {
                let scale = &before[*s].data;
                let dx: Vec<f32> = g.iter().enumerate().map(|(i, &gv)| gv * scale[i / hw]).collect();
                accumulate(before, *x, &dx);
            }
            if before[*s].needs_grad {
                let xd = &before[*x].data;
                let mut ds = vec![0.0f64; *c];
                for (i, &gv) in g.iter().enumerate() {
                    ds[i / hw] += gv as f64 * xd[i] as f64;
                }
                let ds: Vec<f32> = ds.into_iter().map(|v| v as f32).collect();
                accumulate(before, *s, &ds);
            }
        }
        BackOp::MulSpatial { x, m, c, hw } => {
            if before[*x].needs_grad {
                let mask = &before[*m].data;
                let dx: Vec<f32> = g.iter().enumerate().map(|(i, &gv)| gv * mask[i % hw]).collect();
                accumulate(before, *x, &dx);
            }
            if before[*m].needs_grad {
                let xd = &before[*x].data;
                let mut dm = vec![0.0f64; *hw];
                let _ = c;
                for (i, &gv) in g.iter().enumerate() {
                    dm[i % hw] += gv as f64 * xd[i] as f64;
                }
                let dm: Vec<f32> = dm.into_iter().map(|v| v as f32).collect();
                accumulate(before, *m, &dm);
            }
        }
        BackOp::SumAll { x } => {
            let dx = vec![g[0]; before[*x].data.len()];
            accumulate(before, *x, &dx);
        }
        BackOp::MeanAll { x } => {
            let n = before[*x].data.len();
            let dx = vec![g[0] / n as f32; n];
            accumulate(before, *x, &dx);
        }
        BackOp::AffinityTopk { keys, query, ck, m, p } => {
            let (dk, dq) = kernels::affinity_topk_grad(
                &before[*keys].data,
                &before[*query].data,
                &node.data,
                g,
                *ck,
                *m,
                *p,
            );
            accumulate(before, *keys, &dk);
            accumulate(before, *query, &dq);
        }
        BackOp::Dice {
            pred,
            gt,
            sum_p,
            sum_g,
            sum_pg,
        } => {
            let den = sum_p + sum_g + 1.0;
            let num = 2.0 * sum_pg + 1.0;
            let g0 = g[0] as f64;
            let dx: Vec<f32> = gt
                .iter()
                .map(|&gv| (g0 * -(2.0 * gv as f64 * den - num) / (den * den)) as f32)
                .collect();
            accumulate(before, *pred, &dx);
        }
        BackOp::WeightedBce { logits, gt, w_fg, w_bg } => {
            let n = gt.len() as f64;
            let g0 = g[0] as f64;
            let dx: Vec<f32> = before[*logits]
                .data
                .iter()
                .zip(gt)
                .map(|(&x, &z)| {
                    let w = if z > 0.5 { *w_fg } else { *w_bg };
                    let sig = 1.0 / (1.0 + (-x as f64).exp());
                    (g0 * w * (sig - z as f64) / n) as f32
                })
                .collect();
            accumulate(before, *logits, &dx);
        }
        BackOp::SoftmaxCeRows {
            logits,
            targets,
            row_weights,
            weight_sum,
        } => {
            let z = &before[*logits].data;
            let cols = z.len() / targets.len();
            let g0 = g[0] as f64;
            let mut dx = vec![0.0f32; z.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = &z[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                let w = row_weights[r] as f64 / weight_sum;
                for c in 0..cols {
                    let prob = (row[c] as f64 - max).exp() / sum;
                    let ind = if c == t { 1.0 } else { 0.0 };
                    dx[r * cols + c] = (g0 * w * (prob - ind)) as f32;
                }
            }
            accumulate(before, *logits, &dx);
        }
        BackOp::BootstrappedCe {
            dist,
            labels,
            selected,
            cols,
        } => {
            let d = &before[*dist].data;
            let g0 = g[0] as f64;
            let mut dx = vec![0.0f32; d.len()];
            let count = selected.len() as f64;
            for &px in selected {
                let idx = labels[px] * cols + px;
                let v = d[idx] as f64;
                if v > LOG_FLOOR {
                    dx[idx] = (-g0 / (count * v)) as f32;
                }
            }
            accumulate(before, *dist, &dx);
        }
        BackOp::SoftAggregate { probs, objects, pixels } => {
            let d = &before[*probs].data;
            let mut dx = vec![0.0f32; d.len()];
            for j in 0..*pixels {
                // recompute forward quantities in f64
                let mut clamped = vec![0.0f64; *objects];
                let mut bg_raw = 1.0f64;
                for k in 0..*objects {
                    let p = (d[k * pixels + j] as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
                    clamped[k] = p;
                    bg_raw *= 1.0 - p;
                }
                let bg = bg_raw.clamp(BG_EPS, 1.0 - BG_EPS);
                let bg_clamped = bg != bg_raw;
                let mut odds = vec![0.0f64; *objects + 1];
                odds[0] = bg / (1.0 - bg);
                let mut sum = odds[0];
                for k in 0..*objects {
                    odds[k + 1] = clamped[k] / (1.0 - clamped[k]);
                    sum += odds[k + 1];
                }
                let mut gdot = 0.0f64;
                for i in 0..=*objects {
                    gdot += g[i * pixels + j] as f64 * odds[i] / sum;
                }
                let ghat_bg = g[j] as f64 - gdot;
                for k in 0..*objects {
                    let raw = d[k * pixels + j] as f64;
                    if raw <= PROB_EPS || raw >= 1.0 - PROB_EPS {
                        continue; // clamp is flat
                    }
                    let p = clamped[k];
                    let ghat_k = g[(k + 1) * pixels + j] as f64 - gdot;
                    let mut grad = ghat_k / (sum * (1.0 - p) * (1.0 - p));
                    if !bg_clamped {
                        grad -= ghat_bg * bg_raw / (sum * (1.0 - p) * (1.0 - bg) * (1.0 - bg));
                    }
                    dx[k * pixels + j] = grad as f32;
                }
            }
            accumulate(before, *probs, &dx);
        }
    }
    Ok(())
}
