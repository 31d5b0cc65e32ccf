//! VOS branch: trunk encoder, instance-enhanced key encoding with deformable
//! attention and sigmoid gate injection, and the CBAM memory value encoder.

pub mod decoder;
pub mod loss;

pub use decoder::VosDecoder;
pub use loss::{aggregate_objects, vos_loss};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, ResidualBlock};
use crate::tensor::{Param, Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Backbone channel widths at strides 2/4/8/16/32.
pub const TRUNK_CHANNELS: [usize; 5] = [16, 24, 32, 48, 64];

/// Trunk features for one frame.
#[derive(Debug, Clone, Copy)]
pub struct TrunkFeatures {
    /// stride 4, 8, 32
    pub b: [TensorId; 3],
    /// stride 16
    pub f_res4: TensorId,
}

/// Five conv stages, each followed by a bilinear half-resize; emits the
/// stride 4/8/32 skip features and the stride-16 trunk feature.
#[derive(Debug)]
pub struct Backbone {
    convs: [Conv2d; 5],
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = TRUNK_CHANNELS;
        Backbone {
            convs: [
                Conv2d::new(rng, 3, c[0], 3, 1, 1),
                Conv2d::new(rng, c[0], c[1], 3, 1, 1),
                Conv2d::new(rng, c[1], c[2], 3, 1, 1),
                Conv2d::new(rng, c[2], c[3], 3, 1, 1),
                Conv2d::new(rng, c[3], c[4], 3, 1, 1),
            ],
        }
    }

    pub fn forward(&self, t: &mut Tape, frame: TensorId) -> Result<TrunkFeatures> {
        let s = t.shape(frame).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 {
            return Err(Error::dimension(
                "encode_backbone",
                format!("frame must be [3, 32k, 32k], got {:?}", s),
            ));
        }
        let (mut h, mut w) = (s[1], s[2]);
        let mut x = frame;
        let mut feats = Vec::with_capacity(5);
        for conv in &self.convs {
            let y = conv.forward(t, x)?;
            let y = t.relu(y)?;
            h /= 2;
            w /= 2;
            x = t.resize_bilinear(y, h, w)?;
            feats.push(x);
        }
        Ok(TrunkFeatures {
            b: [feats[1], feats[2], feats[4]],
            f_res4: feats[3],
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Deformable attention: each query predicts reference-point offsets and
/// per-sample weights, gathers bilinear samples of the feature map around
/// its reference point, and mixes them per head.
#[derive(Debug)]
pub struct DeformableAttention {
    pub heads: usize,
    pub samples: usize,
    pub ref_points: Linear,
    pub offsets: Linear,
    pub sample_weights: Linear,
    pub out_proj: Linear,
}

impl DeformableAttention {
    pub fn new(rng: &mut ChaCha8Rng, c_d: usize, c_h: usize, heads: usize, samples: usize) -> Self {
        let mut offsets = Linear::new(rng, c_d, heads * samples * 2);
        // zero offset weights with a small ring of biases spreads the initial
        // samples around each reference point
        offsets.weight.value = Tensor::zeros(&[c_d, heads * samples * 2]);
        let mut bias = vec![0.0f32; heads * samples * 2];
        for h in 0..heads {
            for s in 0..samples {
                let angle = 2.0 * std::f32::consts::PI * (s as f32 + 0.5 * h as f32) / samples as f32;
                bias[(h * samples + s) * 2] = 0.1 * angle.sin();
                bias[(h * samples + s) * 2 + 1] = 0.1 * angle.cos();
            }
        }
        offsets.bias.value = Tensor::from_vec(&[heads * samples * 2], bias).expect("bias shape");
        let mut sample_weights = Linear::new(rng, c_d, heads * samples);
        sample_weights.weight.value = Tensor::zeros(&[c_d, heads * samples]);
        DeformableAttention {
            heads,
            samples,
            ref_points: Linear::new(rng, c_d, 2),
            offsets,
            sample_weights,
            out_proj: Linear::new(rng, c_h, c_h),
        }
    }

    /// `q[N,C_d]`, `feature[C_h,Hm,Wm]` -> `[N,C_h]`. Reference points are a
    /// sigmoid-squashed linear map of the queries; sample weights softmax-
    /// normalize over the samples of each (query, head).
    pub fn forward(&self, t: &mut Tape, q: TensorId, feature: TensorId) -> Result<TensorId> {
        let c_h = t.shape(feature)[0];
        if c_h % self.heads != 0 {
            return Err(Error::Contract(format!(
                "{c_h} feature channels not divisible by {} heads",
                self.heads
            )));
        }
        let dh = c_h / self.heads;
        let n = t.shape(q)[0];
        let raw_ref = self.ref_points.forward(t, q)?;
        let refs = t.sigmoid(raw_ref)?;
        let offs = self.offsets.forward(t, q)?;
        let w_logits = self.sample_weights.forward(t, q)?;
        let ones_row = t.constant(&Tensor::filled(&[1, dh], 1.0));

        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let fh = t.narrow(feature, 0, h * dh, dh)?;
            let wl = t.narrow(w_logits, 1, h * self.samples, self.samples)?;
            let w = t.softmax(wl, 1)?;
            let mut acc: Option<TensorId> = None;
            for s in 0..self.samples {
                let o = t.narrow(offs, 1, (h * self.samples + s) * 2, 2)?;
                let pts = t.add(refs, o)?;
                let sampled = t.bilinear_sample(fh, pts)?; // [N, dh]
                let ws = t.narrow(w, 1, s, 1)?; // [N, 1]
                let wmap = t.matmul(ws, ones_row)?; // [N, dh]
                let contrib = t.mul(sampled, wmap)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, contrib)?,
                    None => contrib,
                });
            }
            heads_out.push(acc.expect("at least one sample"));
        }
        let merged = if heads_out.len() == 1 {
            heads_out[0]
        } else {
            t.concat(1, &heads_out)?
        };
        debug_assert_eq!(t.shape(merged), &[n, c_h]);
        self.out_proj.forward(t, merged)
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.ref_points, &self.offsets, &self.sample_weights, &self.out_proj]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.ref_points.params_mut();
        for l in [&mut self.offsets, &mut self.sample_weights, &mut self.out_proj] {
            out.extend(l.params_mut());
        }
        out
    }
}

/// Sigmoid dot-product gates: one map per query, `sigmoid(q_vos . Q_g)` at
/// every spatial position. Strictly in (0,1).
pub fn instance_gates(t: &mut Tape, q_vos: TensorId, q_g_flat: TensorId) -> Result<TensorId> {
    let logits = t.matmul(q_vos, q_g_flat)?;
    t.sigmoid(logits)
}

/// The instance-aware query key and its intermediates.
#[derive(Debug, Clone, Copy)]
pub struct EnhancedQueryKey {
    /// `[C_h, Hm, Wm]`
    pub q_g: TensorId,
    /// `[N, C_h]`, present when query enhancement is on
    pub q_vos: Option<TensorId>,
    /// `[N, Hm, Wm]` sigmoid gates, present when query enhancement is on
    pub gate_maps: Option<TensorId>,
    /// `[C_k, Hm*Wm]`
    pub key: TensorId,
}

/// Enhanced key encoder: a 3x3 conv over the trunk feature, deformable
/// query aggregation, reverse gate injection, and a conv projection head
/// flattened into the query key.
#[derive(Debug)]
pub struct EnhancedKeyEncoder {
    pub qg_conv: Conv2d,
    pub deform: DeformableAttention,
    pub proj: Conv2d,
    pub enable_qe: bool,
}

impl EnhancedKeyEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_res4: usize,
        c_d: usize,
        c_h: usize,
        c_k: usize,
        n_queries: usize,
        heads: usize,
        samples: usize,
        enable_qe: bool,
    ) -> Self {
        let proj_in = if enable_qe { c_h + n_queries } else { c_h };
        EnhancedKeyEncoder {
            qg_conv: Conv2d::new(rng, c_res4, c_h, 3, 1, 1),
            deform: DeformableAttention::new(rng, c_d, c_h, heads, samples),
            proj: Conv2d::new(rng, proj_in, c_k, 3, 1, 1),
            enable_qe,
        }
    }

    pub fn forward(&self, t: &mut Tape, q_ins: TensorId, f_res4: TensorId) -> Result<EnhancedQueryKey> {
        let q_g = self.qg_conv.forward(t, f_res4)?;
        let gs = t.shape(q_g).to_vec();
        let (c_h, hm, wm) = (gs[0], gs[1], gs[2]);
        let (q_vos, gate_maps, q_cat) = if self.enable_qe {
            let q_vos = self.deform.forward(t, q_ins, q_g)?;
            let q_g_flat = t.reshape(q_g, &[c_h, hm * wm])?;
            let gates = instance_gates(t, q_vos, q_g_flat)?;
            let n = t.shape(gates)[0];
            let gate_maps = t.reshape(gates, &[n, hm, wm])?;
            let q_cat = t.concat(0, &[q_g, gate_maps])?;
            (Some(q_vos), Some(gate_maps), q_cat)
        } else {
            (None, None, q_g)
        };
        let projected = self.proj.forward(t, q_cat)?;
        let ck = t.shape(projected)[0];
        let key = t.reshape(projected, &[ck, hm * wm])?;
        Ok(EnhancedQueryKey {
            q_g,
            q_vos,
            gate_maps,
            key,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.qg_conv.params();
        out.extend(self.deform.params());
        out.extend(self.proj.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.qg_conv.params_mut();
        out.extend(self.deform.params_mut());
        out.extend(self.proj.params_mut());
        out
    }
}

/// Channel-then-spatial sigmoid attention.
#[derive(Debug)]
pub struct Cbam {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> Self {
        Cbam {
            mlp1: Linear::new(rng, channels, (channels / reduction).max(1)),
            mlp2: Linear::new(rng, (channels / reduction).max(1), channels),
            spatial: Conv2d::new(rng, 2, 1, 7, 1, 3),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId> {
        let c = t.shape(x)[0];
        // channel attention: shared MLP over avg- and max-pooled descriptors
        let avg = t.spatial_mean(x)?;
        let mx = t.spatial_max(x)?;
        let gate = |t: &mut Tape, v: TensorId| -> Result<TensorId> {
            let row = t.reshape(v, &[1, c])?;
            let h = self.mlp1.forward(t, row)?;
            let h = t.relu(h)?;
            self.mlp2.forward(t, h)
        };
        let a = gate(t, avg)?;
        let m = gate(t, mx)?;
        let s = t.add(a, m)?;
        let s = t.sigmoid(s)?;
        let s = t.reshape(s, &[c])?;
        let x = t.mul_channel(x, s)?;

        // spatial attention: channel stats through a 7x7 conv
        let cm = t.channel_mean(x)?;
        let cx = t.channel_max(x)?;
        let stacked = t.concat(0, &[cm, cx])?;
        let sp = self.spatial.forward(t, stacked)?;
        let sp = t.sigmoid(sp)?;
        t.mul_spatial(x, sp)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.mlp1.params();
        out.extend(self.mlp2.params());
        out.extend(self.spatial.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.mlp1.params_mut();
        out.extend(self.mlp2.params_mut());
        out.extend(self.spatial.params_mut());
        out
    }
}

/// Memory value encoder: a lightweight mask trunk down to stride 16,
/// concatenation with the frame's trunk feature, two residual blocks, and a
/// CBAM block. One call per object.
#[derive(Debug)]
pub struct ValueEncoder {
    mask_convs: [Conv2d; 4],
    res1: ResidualBlock,
    res2: ResidualBlock,
    cbam: Cbam,
}

/// Mask-trunk channel widths at strides 2/4/8/16.
const MASK_CHANNELS: [usize; 4] = [8, 16, 16, 16];

impl ValueEncoder {
    pub fn new(rng: &mut ChaCha8Rng, c_res4: usize, c_v: usize) -> Self {
        let m = MASK_CHANNELS;
        ValueEncoder {
            mask_convs: [
                Conv2d::new(rng, 1, m[0], 3, 1, 1),
                Conv2d::new(rng, m[0], m[1], 3, 1, 1),
                Conv2d::new(rng, m[1], m[2], 3, 1, 1),
                Conv2d::new(rng, m[2], m[3], 3, 1, 1),
            ],
            res1: ResidualBlock::new(rng, m[3] + c_res4, c_v),
            res2: ResidualBlock::new(rng, c_v, c_v),
            cbam: Cbam::new(rng, c_v, 4),
        }
    }

    /// `mask[1,H,W]` (soft or binary), `f_res4` at stride 16 of the same
    /// frame -> `[C_v, Hm, Wm]`.
    pub fn forward(&self, t: &mut Tape, mask: TensorId, f_res4: TensorId) -> Result<TensorId> {
        let ms = t.shape(mask).to_vec();
        let fs = t.shape(f_res4).to_vec();
        if ms.len() != 3 || ms[0] != 1 {
            return Err(Error::dimension(
                "encode_memory_value",
                format!("mask must be [1,H,W], got {:?}", ms),
            ));
        }
        if ms[1] != fs[1] * 16 || ms[2] != fs[2] * 16 {
            return Err(Error::dimension(
                "encode_memory_value",
                format!("mask {:?} is not 16x the trunk feature {:?}", ms, fs),
            ));
        }
        let (mut h, mut w) = (ms[1], ms[2]);
        let mut x = mask;
        for conv in &self.mask_convs {
            let y = conv.forward(t, x)?;
            let y = t.relu(y)?;
            h /= 2;
            w /= 2;
            x = t.resize_bilinear(y, h, w)?;
        }
        let cat = t.concat(0, &[x, f_res4])?;
        let x = self.res1.forward(t, cat)?;
        let x = self.res2.forward(t, x)?;
        self.cbam.forward(t, x)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.mask_convs.iter().flat_map(|c| c.params()).collect();
        out.extend(self.res1.params());
        out.extend(self.res2.params());
        out.extend(self.cbam.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self
            .mask_convs
            .iter_mut()
            .flat_map(|c| c.params_mut())
            .collect();
        out.extend(self.res1.params_mut());
        out.extend(self.res2.params_mut());
        out.extend(self.cbam.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::identity;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn backbone_strides_for_64px_frame() {
        let mut r = rng(1);
        let bb = Backbone::new(&mut r);
        let mut t = Tape::inference();
        let frame = t.constant(&Tensor::zeros(&[3, 64, 64]));
        let f = bb.forward(&mut t, frame).unwrap();
        assert_eq!(t.shape(f.b[0]), &[24, 16, 16]);
        assert_eq!(t.shape(f.b[1]), &[32, 8, 8]);
        assert_eq!(t.shape(f.f_res4), &[48, 4, 4]);
        assert_eq!(t.shape(f.b[2]), &[64, 2, 2]);
    }

    #[test]
    fn backbone_rejects_indivisible_frames() {
        let mut r = rng(2);
        let bb = Backbone::new(&mut r);
        let mut t = Tape::inference();
        let frame = t.constant(&Tensor::zeros(&[3, 48, 48]));
        assert!(bb.forward(&mut t, frame).is_err());
    }

    #[test]
    fn backbone_is_deterministic_per_seed() {
        let mut r = rng(3);
        let bb = Backbone::new(&mut r);
        let frame = Tensor::randn(&mut r, &[3, 32, 32], 1.0);
        let run = || {
            let mut t = Tape::inference();
            let f = t.constant(&frame);
            let out = bb.forward(&mut t, f).unwrap();
            t.data(out.f_res4).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn deformable_degenerates_to_point_sampling() {
        // S = 1, one head, zero offsets, identity projection: the output is
        // exactly a bilinear sample at the reference points
        let mut r = rng(4);
        let c = 6;
        let mut da = DeformableAttention::new(&mut r, c, c, 1, 1);
        da.offsets.weight.value = Tensor::zeros(&[c, 2]);
        da.offsets.bias.value = Tensor::zeros(&[2]);
        da.out_proj.weight.value = identity(c);
        da.out_proj.bias.value = Tensor::zeros(&[c]);

        let feature = Tensor::randn(&mut r, &[c, 5, 5], 1.0);
        let q = Tensor::randn(&mut r, &[3, c], 1.0);
        let mut t = Tape::inference();
        let qi = t.constant(&q);
        let fi = t.constant(&feature);
        let out = da.forward(&mut t, qi, fi).unwrap();

        // reference points replicated through the same sigmoid map
        let refs_raw = da.ref_points.forward(&mut t, qi).unwrap();
        let refs = t.sigmoid(refs_raw).unwrap();
        let sampled = t.bilinear_sample(fi, refs).unwrap();
        for (a, b) in t.data(out).iter().zip(t.data(sampled)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn uniform_weights_over_identical_samples_match_single_sample() {
        let mut r = rng(5);
        let c = 4;
        let mut da = DeformableAttention::new(&mut r, c, c, 1, 4);
        da.offsets.weight.value = Tensor::zeros(&[c, 8]);
        da.offsets.bias.value = Tensor::zeros(&[8]); // all four samples collapse onto p
        da.sample_weights.weight.value = Tensor::zeros(&[c, 4]);
        da.sample_weights.bias.value = Tensor::zeros(&[4]);
        da.out_proj.weight.value = identity(c);
        da.out_proj.bias.value = Tensor::zeros(&[c]);

        let feature = Tensor::randn(&mut r, &[c, 4, 4], 1.0);
        let q = Tensor::randn(&mut r, &[2, c], 1.0);
        let mut t = Tape::inference();
        let (qi, fi) = (t.constant(&q), t.constant(&feature));
        let out = da.forward(&mut t, qi, fi).unwrap();
        let refs_raw = da.ref_points.forward(&mut t, qi).unwrap();
        let refs = t.sigmoid(refs_raw).unwrap();
        let sampled = t.bilinear_sample(fi, refs).unwrap();
        for (a, b) in t.data(out).iter().zip(t.data(sampled)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn deformable_matches_direct_sum_oracle() {
        let mut r = rng(6);
        let (c_d, c_h, heads, samples, n) = (6, 6, 2, 3, 4);
        let da = DeformableAttention::new(&mut r, c_d, c_h, heads, samples);
        let feature = Tensor::randn(&mut r, &[c_h, 5, 4], 1.0);
        let q = Tensor::randn(&mut r, &[n, c_d], 1.0);
        let mut t = Tape::inference();
        let (qi, fi) = (t.constant(&q), t.constant(&feature));
        let out = da.forward(&mut t, qi, fi).unwrap();

        // f64 oracle following the same formula
        let lin = |x: &[f32], l: &Linear| -> Vec<f64> {
            let (ci, co) = (l.weight.value.shape()[0], l.weight.value.shape()[1]);
            let rows = x.len() / ci;
            let mut y = vec![0.0f64; rows * co];
            for rr in 0..rows {
                for oo in 0..co {
                    let mut acc = l.bias.value.data()[oo] as f64;
                    for ii in 0..ci {
                        acc += x[rr * ci + ii] as f64 * l.weight.value.data()[ii * co + oo] as f64;
                    }
                    y[rr * co + oo] = acc;
                }
            }
            y
        };
        let refs: Vec<f64> = lin(q.data(), &da.ref_points)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let offs = lin(q.data(), &da.offsets);
        let wlog = lin(q.data(), &da.sample_weights);
        let dh = c_h / heads;
        let sample64 = |py: f64, px: f64, ch: usize| -> f64 {
            let y = py.clamp(0.0, 1.0) * 4.0;
            let x = px.clamp(0.0, 1.0) * 3.0;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(4), (x0 + 1).min(3));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |r: usize, c: usize| feature.data()[(ch * 5 + r) * 4 + c] as f64;
            (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                + (1.0 - fy) * fx * at(y0, x1)
                + fy * (1.0 - fx) * at(y1, x0)
                + fy * fx * at(y1, x1)
        };
        for qq in 0..n {
            let mut merged = vec![0.0f64; c_h];
            for h in 0..heads {
                let logits: Vec<f64> =
                    (0..samples).map(|s| wlog[qq * heads * samples + h * samples + s]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for s in 0..samples {
                    let a = (logits[s] - max).exp() / z;
                    let oy = offs[qq * heads * samples * 2 + (h * samples + s) * 2];
                    let ox = offs[qq * heads * samples * 2 + (h * samples + s) * 2 + 1];
                    let py = refs[qq * 2] + oy;
                    let px = refs[qq * 2 + 1] + ox;
                    for d in 0..dh {
                        merged[h * dh + d] += a * sample64(py, px, h * dh + d);
                    }
                }
            }
            let out_proj = lin(
                &merged.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
                &da.out_proj,
            );
            for ch in 0..c_h {
                let got = t.data(out)[qq * c_h + ch] as f64;
                assert!(
                    (got - out_proj[ch]).abs() <= 1e-4 * out_proj[ch].abs().max(1.0),
                    "query {qq} ch {ch}: {got} vs {}",
                    out_proj[ch]
                );
            }
        }
    }

    #[test]
    fn orthogonal_queries_give_half_gates() {
        let mut t = Tape::new();
        let q_vos = t.constant(&Tensor::zeros(&[2, 4]));
        let mut r = rng(7);
        let qg = t.constant(&Tensor::randn(&mut r, &[4, 6], 1.0));
        let g = instance_gates(&mut t, q_vos, qg).unwrap();
        assert!(t.data(g).iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn aligned_query_saturates_its_gate() {
        let mut t = Tape::new();
        // single query equal to a single strong column
        let col = vec![8.0f32, 8.0, 8.0, 8.0];
        let q_vos = t.constant(&Tensor::from_vec(&[1, 4], col.clone()).unwrap());
        let mut qg = vec![0.0f32; 4 * 3];
        for c in 0..4 {
            qg[c * 3 + 1] = col[c]; // column 1 matches the query
        }
        let qg = t.constant(&Tensor::from_vec(&[4, 3], qg).unwrap());
        let g = instance_gates(&mut t, q_vos, qg).unwrap();
        let d = t.data(g);
        assert!(d[1] > 0.999);
        assert!((d[0] - 0.5).abs() < 1e-6 && (d[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn key_encoder_output_extent_is_ck_by_positions() {
        let mut r = rng(8);
        for &enable_qe in &[true, false] {
            let enc = EnhancedKeyEncoder::new(&mut r, 12, 8, 8, 4, 3, 2, 4, enable_qe);
            let mut t = Tape::inference();
            let q = t.constant(&Tensor::randn(&mut r, &[3, 8], 1.0));
            let f = t.constant(&Tensor::randn(&mut r, &[12, 4, 6], 1.0));
            let out = enc.forward(&mut t, q, f).unwrap();
            assert_eq!(t.shape(out.key), &[4, 24]);
            assert_eq!(out.q_vos.is_some(), enable_qe);
            if let Some(g) = out.gate_maps {
                assert!(t.data(g).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn cbam_gates_lie_strictly_inside_unit_interval() {
        let mut r = rng(9);
        let cbam = Cbam::new(&mut r, 8, 4);
        let x = Tensor::randn(&mut r, &[8, 4, 4], 1.0);
        let mut t = Tape::inference();
        let xi = t.constant(&x);
        let avg = t.spatial_mean(xi).unwrap();
        let mxv = t.spatial_max(xi).unwrap();
        let row_a = t.reshape(avg, &[1, 8]).unwrap();
        let row_m = t.reshape(mxv, &[1, 8]).unwrap();
        let ha = cbam.mlp1.forward(&mut t, row_a).unwrap();
        let ha = t.relu(ha).unwrap();
        let ha = cbam.mlp2.forward(&mut t, ha).unwrap();
        let hm = cbam.mlp1.forward(&mut t, row_m).unwrap();
        let hm = t.relu(hm).unwrap();
        let hm = cbam.mlp2.forward(&mut t, hm).unwrap();
        let s = t.add(ha, hm).unwrap();
        let s = t.sigmoid(s).unwrap();
        assert!(t.data(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cbam_matches_two_stage_formula_oracle() {
        let mut r = rng(10);
        let c = 8;
        let cbam = Cbam::new(&mut r, c, 4);
        let x = Tensor::randn(&mut r, &[c, 3, 3], 1.0);
        let mut t = Tape::inference();
        let xi = t.constant(&x);
        let out = cbam.forward(&mut t, xi).unwrap();

        // f64 oracle of channel then spatial attention
        let hw = 9;
        let lin = |x: &[f64], l: &Linear, relu: bool| -> Vec<f64> {
            let (ci, co) = (l.weight.value.shape()[0], l.weight.value.shape()[1]);
            let mut y = vec![0.0f64; co];
            for oo in 0..co {
                let mut acc = l.bias.value.data()[oo] as f64;
                for ii in 0..ci {
                    acc += x[ii] * l.weight.value.data()[ii * co + oo] as f64;
                }
                y[oo] = if relu { acc.max(0.0) } else { acc };
            }
            y
        };
        let mut avg = vec![0.0f64; c];
        let mut mx = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for i in 0..hw {
                let v = x.data()[ch * hw + i] as f64;
                avg[ch] += v / hw as f64;
                mx[ch] = mx[ch].max(v);
            }
        }
        let a = lin(&lin(&avg, &cbam.mlp1, true), &cbam.mlp2, false);
        let m = lin(&lin(&mx, &cbam.mlp1, true), &cbam.mlp2, false);
        let sgate: Vec<f64> = a
            .iter()
            .zip(&m)
            .map(|(x, y)| 1.0 / (1.0 + (-(x + y)).exp()))
            .collect();
        let mut x1 = vec![0.0f64; c * hw];
        for ch in 0..c {
            for i in 0..hw {
                x1[ch * hw + i] = x.data()[ch * hw + i] as f64 * sgate[ch];
            }
        }
        // spatial stage
        let mut stacked = vec![0.0f64; 2 * hw];
        for i in 0..hw {
            let mut s = 0.0;
            let mut mv = f64::NEG_INFINITY;
            for ch in 0..c {
                s += x1[ch * hw + i];
                mv = mv.max(x1[ch * hw + i]);
            }
            stacked[i] = s / c as f64;
            stacked[hw + i] = mv;
        }
        let w = &cbam.spatial.weight.value;
        let b = cbam.spatial.bias.value.data()[0] as f64;
        let mut sp = vec![0.0f64; hw];
        for oy in 0..3i64 {
            for ox in 0..3i64 {
                let mut acc = b;
                for ci in 0..2 {
                    for ky in 0..7i64 {
                        for kx in 0..7i64 {
                            let iy = oy + ky - 3;
                            let ix = ox + kx - 3;
                            if iy < 0 || iy >= 3 || ix < 0 || ix >= 3 {
                                continue;
                            }
                            acc += stacked[ci * hw + (iy * 3 + ix) as usize]
                                * w.data()[((ci) * 7 + ky as usize) * 7 + kx as usize] as f64;
                        }
                    }
                }
                sp[(oy * 3 + ox) as usize] = 1.0 / (1.0 + (-acc).exp());
            }
        }
        for ch in 0..c {
            for i in 0..hw {
                let want = x1[ch * hw + i] * sp[i];
                let got = t.data(out)[ch * hw + i] as f64;
                assert!(
                    (got - want).abs() <= 1e-5 * want.abs().max(1.0),
                    "ch {ch} i {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn value_encoder_shapes_and_mismatch_error() {
        let mut r = rng(11);
        let enc = ValueEncoder::new(&mut r, 12, 8);
        let mut t = Tape::inference();
        let mask = t.constant(&Tensor::zeros(&[1, 64, 64]));
        let f = t.constant(&Tensor::randn(&mut r, &[12, 4, 4], 1.0));
        let v = enc.forward(&mut t, mask, f).unwrap();
        assert_eq!(t.shape(v), &[8, 4, 4]);

        let bad = t.constant(&Tensor::zeros(&[1, 32, 32]));
        assert!(matches!(
            enc.forward(&mut t, bad, f),
            Err(Error::Dimension { .. })
        ));
    }
}
