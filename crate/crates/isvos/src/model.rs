//! The full two-branch model: assembly, per-frame forward passes, and a
//! self-contained checkpoint format.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::instance::{
    FeaturePyramid, InstanceHead, InstancePrediction, ObjectQuerySet, PixelDecoder, QueryDecoder,
};
use crate::tensor::{Param, Tape, Tensor, TensorId};
use crate::vos::{Backbone, EnhancedKeyEncoder, EnhancedQueryKey, TrunkFeatures, ValueEncoder, VosDecoder, TRUNK_CHANNELS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Everything the per-frame forward pass produces before memory reading.
#[derive(Debug, Clone)]
pub struct FrameEncoding {
    pub trunk: TrunkFeatures,
    pub pyramid: FeaturePyramid,
    pub queries: ObjectQuerySet,
    pub predictions: Vec<InstancePrediction>,
    pub enhanced: EnhancedQueryKey,
}

#[derive(Debug)]
pub struct IsvosModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub pixel_decoder: PixelDecoder,
    pub query_decoder: QueryDecoder,
    pub instance_head: InstanceHead,
    pub key_encoder: EnhancedKeyEncoder,
    pub value_encoder: ValueEncoder,
    pub vos_decoder: VosDecoder,
}

impl IsvosModel {
    /// Builds a model with parameters drawn deterministically from
    /// `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c_res4 = TRUNK_CHANNELS[3];
        Ok(IsvosModel {
            config: config.clone(),
            backbone: Backbone::new(&mut rng),
            pixel_decoder: PixelDecoder::new(&mut rng, c_res4, config.c_d, config.c_eps),
            query_decoder: QueryDecoder::new(
                &mut rng,
                config.num_queries,
                config.c_d,
                config.decoder_layers,
                config.heads,
            ),
            instance_head: InstanceHead::new(&mut rng, config.c_d, config.c_eps, config.num_classes),
            key_encoder: EnhancedKeyEncoder::new(
                &mut rng,
                c_res4,
                config.c_d,
                config.c_h,
                config.c_k,
                config.num_queries,
                config.heads,
                config.sample_points,
                config.enable_qe,
            ),
            value_encoder: ValueEncoder::new(&mut rng, c_res4, config.c_v),
            vos_decoder: VosDecoder::new(
                &mut rng,
                [TRUNK_CHANNELS[1], TRUNK_CHANNELS[2], TRUNK_CHANNELS[4]],
                config.c_d,
                config.c_v,
                config.enable_mpf,
            ),
        })
    }

    /// Memory spatial extent per frame at the configured image size.
    pub fn memory_positions(&self) -> usize {
        let s = self.config.image_size / 16;
        s * s
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.backbone.params();
        out.extend(self.pixel_decoder.params());
        out.extend(self.query_decoder.params());
        out.extend(self.instance_head.params());
        out.extend(self.key_encoder.params());
        out.extend(self.value_encoder.params());
        out.extend(self.vos_decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        out.extend(self.pixel_decoder.params_mut());
        out.extend(self.query_decoder.params_mut());
        out.extend(self.instance_head.params_mut());
        out.extend(self.key_encoder.params_mut());
        out.extend(self.value_encoder.params_mut());
        out.extend(self.vos_decoder.params_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Backbone -> pixel decoder -> query decoder -> enhanced key, for one
    /// frame. `with_class` controls whether class logits are produced (they
    /// are skipped at inference; the per-layer mask path always runs since
    /// the attention masks need it).
    pub fn encode_frame(&self, t: &mut Tape, frame: TensorId, with_class: bool) -> Result<FrameEncoding> {
        let trunk = self.backbone.forward(t, frame)?;
        let pyramid = self.pixel_decoder.forward(t, trunk.f_res4, trunk.b)?;
        let (queries, predictions) =
            self.query_decoder
                .decode(t, &pyramid, &self.instance_head, with_class, false)?;
        let enhanced = self.key_encoder.forward(t, queries.q_final(), trunk.f_res4)?;
        Ok(FrameEncoding {
            trunk,
            pyramid,
            queries,
            predictions,
            enhanced,
        })
    }

    /// Encodes one memory value per object mask (`[1,H,W]` each, soft or
    /// binary) into `[objects, C_v, Hm*Wm]`.
    pub fn encode_object_values(
        &self,
        t: &mut Tape,
        masks: &[TensorId],
        f_res4: TensorId,
    ) -> Result<TensorId> {
        if masks.is_empty() {
            return Err(Error::Contract("at least one object mask is required".into()));
        }
        let mut rows = Vec::with_capacity(masks.len());
        for &m in masks {
            let v = self.value_encoder.forward(t, m, f_res4)?;
            let s = t.shape(v).to_vec();
            rows.push(t.reshape(v, &[1, s[0], s[1] * s[2]])?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            t.concat(0, &rows)
        }
    }

    /// Affinity + weighted readout against in-tape memory tensors.
    /// `mem_keys[C_k, M]`, `mem_values[K, C_v, M]` -> `[K, C_v, P]`.
    pub fn read_memory(
        &self,
        t: &mut Tape,
        mem_keys: TensorId,
        mem_values: TensorId,
        query_key: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let affinity = t.affinity_topk(mem_keys, query_key, self.config.topk)?;
        let vs = t.shape(mem_values).to_vec();
        let (objects, c_v, m) = (vs[0], vs[1], vs[2]);
        let flat = t.reshape(mem_values, &[objects * c_v, m])?;
        let read = t.matmul(flat, affinity)?;
        let p = t.shape(read)[1];
        let readout = t.reshape(read, &[objects, c_v, p])?;
        Ok((affinity, readout))
    }

    /// Decodes one probability map per object from the memory readout.
    pub fn decode_objects(
        &self,
        t: &mut Tape,
        readout: TensorId,
        pyramid: &FeaturePyramid,
    ) -> Result<Vec<TensorId>> {
        let s = t.shape(readout).to_vec();
        let (objects, c_v, p) = (s[0], s[1], s[2]);
        let hm = (p as f64).sqrt() as usize;
        if hm * hm != p {
            return Err(Error::dimension(
                "decode_objects",
                format!("non-square memory extent {p}"),
            ));
        }
        let mut out = Vec::with_capacity(objects);
        for k in 0..objects {
            let slab = t.narrow(readout, 0, k, 1)?;
            let f_mem = t.reshape(slab, &[c_v, hm, hm])?;
            out.push(self.vos_decoder.forward(t, f_mem, pyramid)?);
        }
        Ok(out)
    }

    /// Writes config and parameters; the format is self-contained and
    /// byte-stable for a given model state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let json = serde_json::to_vec(&self.config)?;
        f.write_all(b"ISVM")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        let params = self.params();
        f.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            f.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.value.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Rebuilds a model from [`IsvosModel::save`] output.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Parse {
                    offset: *pos,
                    detail: "checkpoint truncated".into(),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"ISVM" {
            return Err(Error::Parse {
                offset: 0,
                detail: "not a model checkpoint".into(),
            });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let json_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(take(&mut pos, json_len)?)?;
        let mut model = IsvosModel::new(&config)?;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(Error::Parse {
                offset: pos,
                detail: format!("checkpoint has {count} tensors, model needs {}", params.len()),
            });
        }
        for p in params.iter_mut() {
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            if shape != p.value.shape() {
                return Err(Error::Parse {
                    offset: pos,
                    detail: format!("tensor shape {:?} does not match {:?}", shape, p.value.shape()),
                });
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, 4 * n)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            p.value = Tensor::from_vec(&shape, data)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            c_h: 16,
            c_d: 16,
            c_k: 8,
            c_v: 16,
            c_eps: 16,
            num_queries: 4,
            decoder_layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes_line_up() {
        let cfg = tiny_config();
        let model = IsvosModel::new(&cfg).unwrap();
        let mut t = Tape::inference();
        let frame = t.constant(&Tensor::zeros(&[3, 32, 32]));
        let enc = model.encode_frame(&mut t, frame, true).unwrap();
        assert_eq!(t.shape(enc.enhanced.key), &[8, 4]);
        assert_eq!(enc.predictions.len(), 3); // init + 2 layers
        let m0 = t.constant(&Tensor::filled(&[1, 32, 32], 0.5));
        let values = model.encode_object_values(&mut t, &[m0, m0], enc.trunk.f_res4).unwrap();
        assert_eq!(t.shape(values), &[2, 16, 4]);
        let keys = t.constant(&Tensor::zeros(&[8, 4]));
        let (aff, read) = model.read_memory(&mut t, keys, values, enc.enhanced.key).unwrap();
        assert_eq!(t.shape(aff), &[4, 4]);
        assert_eq!(t.shape(read), &[2, 16, 4]);
        let probs = model.decode_objects(&mut t, read, &enc.pyramid).unwrap();
        assert_eq!(probs.len(), 2);
        assert_eq!(t.shape(probs[0]), &[1, 32, 32]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config();
        let a = IsvosModel::new(&cfg).unwrap();
        let b = IsvosModel::new(&cfg).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value.data(), y.value.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny_config();
        let model = IsvosModel::new(&cfg).unwrap();
        model.save(&path).unwrap();
        let back = IsvosModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        // corrupting the magic is a parse error
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(IsvosModel::load(&path), Err(Error::Parse { .. })));
    }
}
