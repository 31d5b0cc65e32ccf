//! Model and run configuration, JSON-loadable.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// All knobs of the model and the training/inference protocol. The memory
/// protocol defaults (capacity 16, interval 5, topk 20) are the reference
/// operating point; the rest are desk-scale defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// key-encoder hidden width
    pub c_h: usize,
    /// query/memory key width
    pub c_k: usize,
    /// memory value width
    pub c_v: usize,
    /// query feature width
    pub c_d: usize,
    /// per-pixel embedding width
    pub c_eps: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// deformable-attention samples per (query, head)
    pub sample_points: usize,
    pub memory_capacity: usize,
    pub memorize_interval: usize,
    pub topk: usize,
    pub bootstrap_ratio: f32,
    /// steps trained at ratio 1 before bootstrapping kicks in
    pub bootstrap_warmup: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub momentum: f32,
    pub no_object_weight: f32,
    /// weight of the instance loss in the joint objective
    pub lambda_is: f32,
    pub enable_qe: bool,
    pub enable_mpf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            c_h: 32,
            c_k: 16,
            c_v: 32,
            c_d: 32,
            c_eps: 32,
            num_queries: 8,
            decoder_layers: 3,
            heads: 2,
            sample_points: 4,
            memory_capacity: 16,
            memorize_interval: 5,
            topk: 20,
            bootstrap_ratio: 0.25,
            bootstrap_warmup: 50,
            num_classes: 3,
            seed: 17,
            learning_rate: 0.05,
            momentum: 0.9,
            no_object_weight: 0.1,
            lambda_is: 1.0,
            enable_qe: true,
            enable_mpf: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Spec(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        let positive = [
            ("c_h", self.c_h),
            ("c_k", self.c_k),
            ("c_v", self.c_v),
            ("c_d", self.c_d),
            ("c_eps", self.c_eps),
            ("num_queries", self.num_queries),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("sample_points", self.sample_points),
            ("memory_capacity", self.memory_capacity),
            ("memorize_interval", self.memorize_interval),
            ("topk", self.topk),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.c_d % self.heads != 0 || self.c_h % self.heads != 0 {
            return Err(Error::Spec("c_d and c_h must divide evenly into heads".into()));
        }
        if self.c_d != self.c_h {
            // the deformable layer feeds q_ins (C_d) into a C_h feature map
            return Err(Error::Spec("c_h must equal c_d (shared hidden width)".into()));
        }
        if !(0.0 < self.bootstrap_ratio && self.bootstrap_ratio <= 1.0) {
            return Err(Error::Spec("bootstrap_ratio must be in (0,1]".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_protocol() {
        let c = ModelConfig::default();
        assert_eq!(c.memory_capacity, 16);
        assert_eq!(c.memorize_interval, 5);
        assert_eq!(c.topk, 20);
        assert_eq!(c.image_size, 64);
        assert_eq!((c.c_h, c.c_d, c.c_k, c.c_v, c.num_queries), (32, 32, 16, 32, 8));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        let mut c = ModelConfig::default();
        c.image_size = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.topk = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.bootstrap_ratio = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_partial_fields() {
        let json = r#"{ "memory_capacity": 4, "seed": 99 }"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.memory_capacity, 4);
        assert_eq!(c.seed, 99);
        assert_eq!(c.topk, 20);
    }
}
