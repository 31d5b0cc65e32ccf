//! Instance segmentation branch: pixel decoder over the backbone trunk,
//! masked-attention query decoder, and the shared class/mask prediction head.

mod hungarian;
mod loss;

pub use hungarian::{assignment_cost, hungarian_match};
pub use loss::{instance_loss, matching_cost_matrix, InstanceTargets};

use crate::error::{Error, Result};
use crate::layers::{to_positions, Conv2d, Linear};
use crate::tensor::{kernels, Param, Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Additive attention-mask value for background positions.
pub const MASK_NEG: f32 = -1e4;

/// Multi-scale features shared by both branches: pixel-decoder levels `p`
/// at strides 32/16/8, backbone features `b` at strides 4/8/32, the trunk
/// feature at stride 16, and per-pixel embeddings at stride 4.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub p: [TensorId; 3],
    pub b: [TensorId; 3],
    pub f_res4: TensorId,
    pub f_pixel: TensorId,
}

/// Decoded object-query states: `q_layers[0]` is the learnable init, the
/// last entry is the final decoder output.
#[derive(Debug, Clone)]
pub struct ObjectQuerySet {
    pub q_layers: Vec<TensorId>,
}

impl ObjectQuerySet {
    pub fn q_final(&self) -> TensorId {
        *self.q_layers.last().expect("at least the initial queries")
    }
}

/// Per-query classification and mask logits. Class logits are omitted at
/// inference, where only the mask path feeds the attention masks.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub class_logits: Option<TensorId>,
    pub mask_logits: TensorId,
}

/// Pixel decoder: turns the stride-16 trunk feature into the three-level
/// pyramid (strides 32/16/8) and stride-4 per-pixel embeddings with
/// alternating convolution and upsampling.
#[derive(Debug)]
pub struct PixelDecoder {
    trunk: Conv2d,
    p0: Conv2d,
    p1: Conv2d,
    up8: Conv2d,
    p2: Conv2d,
    up4: Conv2d,
    pixel: Conv2d,
}

impl PixelDecoder {
    pub fn new(rng: &mut ChaCha8Rng, c_res4: usize, c_d: usize, c_eps: usize) -> Self {
        PixelDecoder {
            trunk: Conv2d::new(rng, c_res4, c_d, 3, 1, 1),
            p0: Conv2d::new(rng, c_d, c_d, 3, 1, 1),
            p1: Conv2d::new(rng, c_d, c_d, 3, 1, 1),
            up8: Conv2d::new(rng, c_d, c_d, 3, 1, 1),
            p2: Conv2d::new(rng, c_d, c_d, 3, 1, 1),
            up4: Conv2d::new(rng, c_d, c_d, 3, 1, 1),
            pixel: Conv2d::new(rng, c_d, c_eps, 3, 1, 1),
        }
    }

    /// `f_res4` is stride 16 with even spatial extent. The backbone features
    /// pass through into the pyramid unchanged.
    pub fn forward(&self, t: &mut Tape, f_res4: TensorId, b: [TensorId; 3]) -> Result<FeaturePyramid> {
        let s = t.shape(f_res4).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dimension(
                "pixel_decode",
                format!("stride-16 trunk feature must have even extent, got {:?}", s),
            ));
        }
        let h16 = self.trunk.forward(t, f_res4)?;
        let h16 = t.relu(h16)?;
        let p1 = self.p1.forward(t, h16)?;
        let half = t.resize_bilinear(h16, s[1] / 2, s[2] / 2)?;
        let p0 = self.p0.forward(t, half)?;
        let u8_ = t.upsample_bilinear(h16, 2)?;
        let h8 = self.up8.forward(t, u8_)?;
        let h8 = t.relu(h8)?;
        let p2 = self.p2.forward(t, h8)?;
        let u4 = t.upsample_bilinear(h8, 2)?;
        let h4 = self.up4.forward(t, u4)?;
        let h4 = t.relu(h4)?;
        let f_pixel = self.pixel.forward(t, h4)?;
        Ok(FeaturePyramid {
            p: [p0, p1, p2],
            b,
            f_res4,
            f_pixel,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.trunk, &self.p0, &self.p1, &self.up8, &self.p2, &self.up4, &self.pixel]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.trunk.params_mut();
        for c in [&mut self.p0, &mut self.p1, &mut self.up8, &mut self.p2, &mut self.up4, &mut self.pixel] {
            out.extend(c.params_mut());
        }
        out
    }
}

/// Multi-head scaled dot-product attention with an optional additive mask
/// (`0` foreground, [`MASK_NEG`] background, shared across heads). No
/// residual connection.
pub fn multi_head_attention(
    t: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    attn_mask: Option<TensorId>,
    heads: usize,
) -> Result<TensorId> {
    let c = t.shape(q)[1];
    if c % heads != 0 {
        return Err(Error::Contract(format!("{c} channels not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.narrow(q, 1, h * dh, dh)?;
        let kh = t.narrow(k, 1, h * dh, dh)?;
        let vh = t.narrow(v, 1, h * dh, dh)?;
        let kt = t.transpose(kh)?;
        let logits = t.matmul(qh, kt)?;
        let logits = t.affine(logits, scale, 0.0)?;
        let logits = match attn_mask {
            Some(m) => t.add(logits, m)?,
            None => logits,
        };
        let a = t.softmax(logits, 1)?;
        outs.push(t.matmul(a, vh)?);
    }
    t.concat(1, &outs)
}

/// Cross-attention restricted to each query's predicted foreground, with a
/// residual connection: `softmax(mask + q k^T / sqrt(d_h)) v + q`.
pub fn masked_cross_attention(
    t: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    attn_mask: Option<TensorId>,
    heads: usize,
) -> Result<TensorId> {
    let merged = multi_head_attention(t, q, k, v, attn_mask, heads)?;
    t.add(merged, q)
}

/// One decoder layer: masked cross-attention into the level features,
/// self-attention among queries, and a feed-forward sublayer, all residual.
#[derive(Debug)]
pub struct DecoderLayer {
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, c_d: usize) -> Self {
        DecoderLayer {
            key_proj: Linear::new(rng, c_d, c_d),
            value_proj: Linear::new(rng, c_d, c_d),
            self_q: Linear::new(rng, c_d, c_d),
            self_k: Linear::new(rng, c_d, c_d),
            self_v: Linear::new(rng, c_d, c_d),
            self_out: Linear::new(rng, c_d, c_d),
            ff1: Linear::new(rng, c_d, 2 * c_d),
            ff2: Linear::new(rng, 2 * c_d, c_d),
        }
    }

    /// `feat` is `[positions, C_d]` with the level embedding already added.
    pub fn forward(
        &self,
        t: &mut Tape,
        q: TensorId,
        feat: TensorId,
        attn_mask: Option<TensorId>,
        heads: usize,
    ) -> Result<TensorId> {
        let k = self.key_proj.forward(t, feat)?;
        let v = self.value_proj.forward(t, feat)?;
        let q = masked_cross_attention(t, q, k, v, attn_mask, heads)?;

        // self-attention among queries
        let sq = self.self_q.forward(t, q)?;
        let sk = self.self_k.forward(t, q)?;
        let sv = self.self_v.forward(t, q)?;
        let sa = multi_head_attention(t, sq, sk, sv, None, heads)?;
        let sa = self.self_out.forward(t, sa)?;
        let q = t.add(sa, q)?;

        // feed-forward
        let h = self.ff1.forward(t, q)?;
        let h = t.relu(h)?;
        let h = self.ff2.forward(t, h)?;
        t.add(h, q)
    }

    pub fn params(&self) -> Vec<&Param> {
        [
            &self.key_proj,
            &self.value_proj,
            &self.self_q,
            &self.self_k,
            &self.self_v,
            &self.self_out,
            &self.ff1,
            &self.ff2,
        ]
        .iter()
        .flat_map(|l| l.params())
        .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.key_proj.params_mut();
        for l in [
            &mut self.value_proj,
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_out,
            &mut self.ff1,
            &mut self.ff2,
        ] {
            out.extend(l.params_mut());
        }
        out
    }
}

/// Linear classifier plus a 2-hidden-layer MLP producing mask embeddings;
/// mask logits are the dot product of embeddings with per-pixel embeddings.
#[derive(Debug)]
pub struct InstanceHead {
    pub class_head: Linear,
    pub mask_mlp: [Linear; 3],
}

impl InstanceHead {
    pub fn new(rng: &mut ChaCha8Rng, c_d: usize, c_eps: usize, num_classes: usize) -> Self {
        InstanceHead {
            class_head: Linear::new(rng, c_d, num_classes + 1),
            mask_mlp: [
                Linear::new(rng, c_d, c_d),
                Linear::new(rng, c_d, c_d),
                Linear::new(rng, c_d, c_eps),
            ],
        }
    }

    pub fn predict(
        &self,
        t: &mut Tape,
        q: TensorId,
        f_pixel: TensorId,
        with_class: bool,
    ) -> Result<InstancePrediction> {
        let class_logits = if with_class {
            Some(self.class_head.forward(t, q)?)
        } else {
            None
        };
        let mut e = self.mask_mlp[0].forward(t, q)?;
        e = t.relu(e)?;
        e = self.mask_mlp[1].forward(t, e)?;
        e = t.relu(e)?;
        e = self.mask_mlp[2].forward(t, e)?;
        let s = t.shape(f_pixel).to_vec();
        let flat = t.reshape(f_pixel, &[s[0], s[1] * s[2]])?;
        let logits = t.matmul(e, flat)?;
        let n = t.shape(q)[0];
        let mask_logits = t.reshape(logits, &[n, s[1], s[2]])?;
        Ok(InstancePrediction {
            class_logits,
            mask_logits,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.class_head.params();
        for l in &self.mask_mlp {
            out.extend(l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.class_head.params_mut();
        for l in &mut self.mask_mlp {
            out.extend(l.params_mut());
        }
        out
    }
}

/// Builds the additive attention mask for one level from the previous mask
/// logits: foreground (logit > 0 after bilinear resize) contributes 0,
/// background [`MASK_NEG`]; queries whose mask is entirely background fall
/// back to unmasked attention.
pub fn attention_mask_at(t: &Tape, mask_logits: TensorId, lh: usize, lw: usize) -> Result<Tensor> {
    let s = t.shape(mask_logits);
    let (n, h, w) = (s[0], s[1], s[2]);
    let resized = kernels::resample_bilinear(t.data(mask_logits), n, h, w, lh, lw);
    let hw = lh * lw;
    let mut out = vec![0.0f32; n * hw];
    for q in 0..n {
        let row = &resized[q * hw..(q + 1) * hw];
        if row.iter().any(|&v| v > 0.0) {
            for (o, &v) in out[q * hw..(q + 1) * hw].iter_mut().zip(row) {
                if v <= 0.0 {
                    *o = MASK_NEG;
                }
            }
        }
        // all-background rows stay zero: unmasked fallback
    }
    Tensor::from_vec(&[n, hw], out)
}

/// Query decoder: `L` layers cycling pyramid levels coarse to fine, each
/// emitting an auxiliary prediction that both feeds the next layer's
/// attention mask and receives its own loss.
#[derive(Debug)]
pub struct QueryDecoder {
    pub q_init: Param,
    pub layers: Vec<DecoderLayer>,
    pub level_embed: [Param; 3],
    pub heads: usize,
}

impl QueryDecoder {
    pub fn new(rng: &mut ChaCha8Rng, n_queries: usize, c_d: usize, num_layers: usize, heads: usize) -> Self {
        QueryDecoder {
            q_init: Param::randn(rng, &[n_queries, c_d], 1.0),
            layers: (0..num_layers).map(|_| DecoderLayer::new(rng, c_d)).collect(),
            level_embed: [
                Param::randn(rng, &[c_d], 0.02),
                Param::randn(rng, &[c_d], 0.02),
                Param::randn(rng, &[c_d], 0.02),
            ],
            heads,
        }
    }

    /// Runs the decoder; when `force_unmasked` is set every layer attends to
    /// the whole level (used by the reduction tests).
    pub fn decode(
        &self,
        t: &mut Tape,
        pyramid: &FeaturePyramid,
        head: &InstanceHead,
        with_class: bool,
        force_unmasked: bool,
    ) -> Result<(ObjectQuerySet, Vec<InstancePrediction>)> {
        let mut q = t.param(&self.q_init);
        let mut set = ObjectQuerySet { q_layers: vec![q] };
        let mut preds = vec![head.predict(t, q, pyramid.f_pixel, with_class)?];
        for (l, layer) in self.layers.iter().enumerate() {
            let level = l % 3;
            let ls = t.shape(pyramid.p[level]).to_vec();
            let feat = to_positions(t, pyramid.p[level])?;
            let emb = t.param(&self.level_embed[level]);
            let feat = t.add_row_bias(feat, emb)?;
            let mask = if force_unmasked {
                None
            } else {
                let m = attention_mask_at(t, preds.last().unwrap().mask_logits, ls[1], ls[2])?;
                Some(t.constant(&m))
            };
            q = layer.forward(t, q, feat, mask, self.heads)?;
            set.q_layers.push(q);
            preds.push(head.predict(t, q, pyramid.f_pixel, with_class)?);
        }
        Ok((set, preds))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.q_init];
        out.extend(self.level_embed.iter());
        for l in &self.layers {
            out.extend(l.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.q_init];
        out.extend(self.level_embed.iter_mut());
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }
}
