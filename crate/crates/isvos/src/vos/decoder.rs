//! VOS decoder: three multi-path fusion stages from stride 16 down to
//! stride 4, then a 1-channel head, sigmoid, and x4 upsampling.

use super::super::instance::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ResidualBlock};
use crate::tensor::{Param, Tape, TensorId};
use rand_chacha::ChaCha8Rng;

/// One fusion stage: aligns the backbone and pixel-decoder features with
/// 3x3 convs, adds the (upsampled) running state to the backbone path,
/// concatenates the pixel path, and mixes through a residual block.
#[derive(Debug)]
pub struct MpfBlock {
    pub b_align: Conv2d,
    pub p_align: Conv2d,
    pub fuse: ResidualBlock,
    /// Stage 0 receives the readout at its own stride and does not upsample.
    pub upsample_state: bool,
}

impl MpfBlock {
    pub fn new(rng: &mut ChaCha8Rng, c_b: usize, c_p: usize, c_v: usize, upsample_state: bool) -> Self {
        MpfBlock {
            b_align: Conv2d::new(rng, c_b, c_v, 3, 1, 1),
            p_align: Conv2d::new(rng, c_p, c_v, 3, 1, 1),
            fuse: ResidualBlock::new(rng, 2 * c_v, c_v),
            upsample_state,
        }
    }

    pub fn forward(&self, t: &mut Tape, o_prev: TensorId, b_i: TensorId, p_i: TensorId) -> Result<TensorId> {
        let o = if self.upsample_state {
            t.upsample_bilinear(o_prev, 2)?
        } else {
            o_prev
        };
        let os = t.shape(o).to_vec();
        let (oh, ow) = (os[1], os[2]);
        let bt = self.b_align.forward(t, b_i)?;
        let bt = self.resize_to(t, bt, oh, ow)?;
        let sum = t.add(o, bt)?;
        let pt = self.p_align.forward(t, p_i)?;
        let pt = self.resize_to(t, pt, oh, ow)?;
        let cat = t.concat(0, &[sum, pt])?;
        self.fuse.forward(t, cat)
    }

    fn resize_to(&self, t: &mut Tape, x: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let s = t.shape(x);
        if s[1] == oh && s[2] == ow {
            Ok(x)
        } else {
            t.resize_bilinear(x, oh, ow)
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.b_align.params();
        out.extend(self.p_align.params());
        out.extend(self.fuse.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.b_align.params_mut();
        out.extend(self.p_align.params_mut());
        out.extend(self.fuse.params_mut());
        out
    }
}

/// Per-object mask decoder. With fusion enabled the three stages consume, in
/// order, `(B_32 up x2, P_0)`, `(B_8, P_1)`, `(B_4, P_2)` at output strides
/// 16 / 8 / 4; without it three residual blocks upsample the readout alone,
/// mirroring the "no fusion" ablation.
#[derive(Debug)]
pub struct VosDecoder {
    stages: Option<[MpfBlock; 3]>,
    plain: Option<[ResidualBlock; 3]>,
    head: Conv2d,
}

impl VosDecoder {
    pub fn new(rng: &mut ChaCha8Rng, c_b: [usize; 3], c_p: usize, c_v: usize, enable_mpf: bool) -> Self {
        let (stages, plain) = if enable_mpf {
            (
                Some([
                    // stage 0 pairs the stride-32 backbone feature with P_0
                    MpfBlock::new(rng, c_b[2], c_p, c_v, false),
                    MpfBlock::new(rng, c_b[1], c_p, c_v, true),
                    MpfBlock::new(rng, c_b[0], c_p, c_v, true),
                ]),
                None,
            )
        } else {
            (
                None,
                Some([
                    ResidualBlock::new(rng, c_v, c_v),
                    ResidualBlock::new(rng, c_v, c_v),
                    ResidualBlock::new(rng, c_v, c_v),
                ]),
            )
        };
        VosDecoder {
            stages,
            plain,
            head: Conv2d::new(rng, c_v, 1, 3, 1, 1),
        }
    }

    /// `f_mem[C_v, Hm, Wm]` (stride 16) -> `[1, H, W]` probabilities.
    pub fn forward(&self, t: &mut Tape, f_mem: TensorId, pyramid: &FeaturePyramid) -> Result<TensorId> {
        let s = t.shape(f_mem).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension(
                "vos_decode",
                format!("readout must be [C_v,Hm,Wm], got {:?}", s),
            ));
        }
        let mut o = f_mem;
        if let Some(stages) = &self.stages {
            o = stages[0].forward(t, o, pyramid.b[2], pyramid.p[0])?;
            o = stages[1].forward(t, o, pyramid.b[1], pyramid.p[1])?;
            o = stages[2].forward(t, o, pyramid.b[0], pyramid.p[2])?;
        } else if let Some(plain) = &self.plain {
            o = plain[0].forward(t, o)?;
            for block in &plain[1..] {
                o = t.upsample_bilinear(o, 2)?;
                o = block.forward(t, o)?;
            }
        }
        let logits = self.head.forward(t, o)?;
        let probs = t.sigmoid(logits)?;
        t.upsample_bilinear(probs, 4)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(stages) = &self.stages {
            for s in stages {
                out.extend(s.params());
            }
        }
        if let Some(plain) = &self.plain {
            for s in plain {
                out.extend(s.params());
            }
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(stages) = &mut self.stages {
            for s in stages {
                out.extend(s.params_mut());
            }
        }
        if let Some(plain) = &mut self.plain {
            for s in plain {
                out.extend(s.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pyramid_64(t: &mut Tape, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        FeaturePyramid {
            p: [
                t.constant(&Tensor::randn(rng, &[8, 2, 2], 1.0)),
                t.constant(&Tensor::randn(rng, &[8, 4, 4], 1.0)),
                t.constant(&Tensor::randn(rng, &[8, 8, 8], 1.0)),
            ],
            b: [
                t.constant(&Tensor::randn(rng, &[6, 16, 16], 1.0)),
                t.constant(&Tensor::randn(rng, &[5, 8, 8], 1.0)),
                t.constant(&Tensor::randn(rng, &[4, 2, 2], 1.0)),
            ],
            f_res4: t.constant(&Tensor::zeros(&[1, 4, 4])),
            f_pixel: t.constant(&Tensor::zeros(&[1, 16, 16])),
        }
    }

    #[test]
    fn stage_strides_reach_quarter_resolution_and_unit_probabilities() {
        let mut r = rng(1);
        let dec = VosDecoder::new(&mut r, [6, 5, 4], 8, 8, true);
        let mut t = Tape::inference();
        let pyr = pyramid_64(&mut t, &mut r);
        let f_mem = t.constant(&Tensor::randn(&mut r, &[8, 4, 4], 1.0));
        let out = dec.forward(&mut t, f_mem, &pyr).unwrap();
        assert_eq!(t.shape(out), &[1, 64, 64]);
        assert!(t.data(out).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_aligned_paths_leave_state_path_only() {
        // with B/P aligner weights and biases zeroed and an identity-free
        // residual, the concat sees (upsampled state, zeros)
        let mut r = rng(2);
        let mut block = MpfBlock::new(&mut r, 4, 8, 8, false);
        block.b_align.weight.value = Tensor::zeros(&[8, 4, 3, 3]);
        block.b_align.bias.value = Tensor::zeros(&[8]);
        let mut t = Tape::inference();
        let o = t.constant(&Tensor::randn(&mut r, &[8, 2, 2], 1.0));
        let b = t.constant(&Tensor::randn(&mut r, &[4, 2, 2], 1.0));
        let p = t.constant(&Tensor::randn(&mut r, &[8, 2, 2], 1.0));
        let out = block.forward(&mut t, o, b, p).unwrap();
        // compare against manually fusing (o, p~) with the same residual block
        let pt = block.p_align.forward(&mut t, p).unwrap();
        let cat = t.concat(0, &[o, pt]).unwrap();
        let want = block.fuse.forward(&mut t, cat).unwrap();
        assert_eq!(t.data(out), t.data(want));
    }

    #[test]
    fn full_block_matches_staged_composition_oracle() {
        let mut r = rng(3);
        let block = MpfBlock::new(&mut r, 4, 6, 8, true);
        let mut t = Tape::inference();
        let o = t.constant(&Tensor::randn(&mut r, &[8, 2, 2], 1.0));
        let b = t.constant(&Tensor::randn(&mut r, &[4, 4, 4], 1.0));
        let p = t.constant(&Tensor::randn(&mut r, &[6, 2, 2], 1.0));
        let out = block.forward(&mut t, o, b, p).unwrap();

        // stage the same ops explicitly
        let o2 = t.upsample_bilinear(o, 2).unwrap();
        let bt = block.b_align.forward(&mut t, b).unwrap();
        let sum = t.add(o2, bt).unwrap();
        let pt = block.p_align.forward(&mut t, p).unwrap();
        let pt = t.resize_bilinear(pt, 4, 4).unwrap();
        let cat = t.concat(0, &[sum, pt]).unwrap();
        let want = block.fuse.forward(&mut t, cat).unwrap();
        for (a, b) in t.data(out).iter().zip(t.data(want)) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn plain_decoder_used_when_fusion_disabled() {
        let mut r = rng(4);
        let dec = VosDecoder::new(&mut r, [6, 5, 4], 8, 8, false);
        let mut t = Tape::inference();
        let pyr = pyramid_64(&mut t, &mut r);
        let f_mem = t.constant(&Tensor::randn(&mut r, &[8, 4, 4], 1.0));
        let out = dec.forward(&mut t, f_mem, &pyr).unwrap();
        assert_eq!(t.shape(out), &[1, 64, 64]);
    }
}
