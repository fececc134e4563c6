use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::quant::PrecisionMap;
use crate::scar::MaskMode;

/// Layers per domain pathway in the full-size model.
pub const REFERENCE_PATHWAY_LAYERS: usize = 8;
/// Hidden width of each domain pathway in the full-size model.
pub const REFERENCE_PATHWAY_HIDDEN: usize = 512;
/// Cluster count used by the full-size model.
pub const REFERENCE_SCAR_K: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GemConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub pathway_layers: usize,
    pub domains: usize,
    pub num_classes: usize,
    pub scar_k: usize,
    pub scar_max_iters: usize,
    pub mask_mode: MaskMode,
    pub max_seq_len: usize,
    pub precision_map: PrecisionMap,
    /// Accept any bit-width in 1..=32 instead of only 4/6/8.
    pub custom_bits: bool,
    /// Fake-quantize weights in the forward pass.
    pub quantize: bool,
    pub tau: f64,
    pub router_layers: usize,
    pub router_hidden: usize,
    pub seed: u64,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            ffn_dim: 64,
            pathway_layers: 2,
            domains: 8,
            num_classes: 16,
            scar_k: 4,
            scar_max_iters: 10,
            mask_mode: MaskMode::Exclude,
            max_seq_len: 32,
            precision_map: PrecisionMap::default(),
            custom_bits: false,
            quantize: true,
            tau: 0.7,
            router_layers: 1,
            router_hidden: 32,
            seed: 0,
        }
    }
}

impl GemConfig {
    /// Full-size pathway shape. Constructible, but far beyond desk scale.
    pub fn reference_scale() -> Self {
        Self {
            embed_dim: REFERENCE_PATHWAY_HIDDEN,
            ffn_dim: 4 * REFERENCE_PATHWAY_HIDDEN,
            pathway_layers: REFERENCE_PATHWAY_LAYERS,
            scar_k: REFERENCE_SCAR_K,
            max_seq_len: 128,
            router_layers: 6,
            router_hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size as usize),
            ("model.embed_dim", self.embed_dim),
            ("model.ffn_dim", self.ffn_dim),
            ("model.num_classes", self.num_classes),
            ("model.scar_k", self.scar_k),
            ("model.max_seq_len", self.max_seq_len),
            ("model.router_hidden", self.router_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(GemError::config(field, "must be positive"));
            }
        }
        if self.domains < 2 {
            return Err(GemError::config("model.domains", "need at least 2 domains"));
        }
        if self.num_classes < 2 {
            return Err(GemError::config("model.num_classes", "need at least 2 classes"));
        }
        if self.scar_k > self.max_seq_len {
            return Err(GemError::config(
                "model.scar_k",
                format!("{} exceeds max_seq_len {}", self.scar_k, self.max_seq_len),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GemError::config("model.tau", format!("{} is outside (0, 1]", self.tau)));
        }
        self.precision_map
            .validate(!self.custom_bits)
            .map_err(|e| match e {
                GemError::Config { field, reason } => GemError::config(format!("model.{field}"), reason),
                other => other,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub kd_enabled: bool,
    pub kd_temperature: f64,
    pub lambda_quant: f64,
    pub lambda_kd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 64,
            epochs: 10,
            weight_decay: 0.01,
            kd_enabled: false,
            kd_temperature: 2.0,
            lambda_quant: crate::quant::DEFAULT_LAMBDA_QUANT,
            lambda_kd: crate::quant::DEFAULT_LAMBDA_KD,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch-size exception used for the biomedical QA benchmark. Kept for
    /// completeness; nothing in the crate trains on that dataset.
    pub fn pubmedqa() -> Self {
        Self { batch_size: 128, ..Self::default() }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(GemError::config(format!("{prefix}.learning_rate"), "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(GemError::config(format!("{prefix}.batch_size"), "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(GemError::config(format!("{prefix}.weight_decay"), "must be >= 0"));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(GemError::config(format!("{prefix}.kd_temperature"), "must be > 0"));
        }
        if !(self.lambda_quant >= 0.0) || !(self.lambda_kd >= 0.0) {
            return Err(GemError::config(format!("{prefix}.lambda_quant"), "loss weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GemError::config(format!("{prefix}.beta1"), "betas must be in [0, 1)"));
        }
        Ok(())
    }
}
