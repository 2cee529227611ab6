//! Run configuration, read from a JSON file. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{GeneratorSpec, PART_COUNT_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // Data.
    pub min_parts: usize,
    pub max_parts: usize,
    pub points_per_part: usize,
    pub render_size: usize,
    pub train_objects: usize,
    pub test_objects: usize,
    pub iou_cap: f64,

    // Slots and part codec.
    /// Slot capacity `P_max`.
    pub p_max: usize,
    /// Tokens per part `K`.
    pub tokens_per_part: usize,
    /// Token width `C`.
    pub latent_dim: usize,
    pub codec_decoder_hidden: usize,
    /// Std of the Gaussian noise added to tokens while training the codec.
    pub latent_noise: f64,

    // View encoder and gate head.
    /// Image feature width `D`.
    pub feature_dim: usize,
    pub view_hidden: usize,
    pub gate_hidden: usize,
    /// Activation threshold for slot selection.
    pub tau: f64,
    pub lambda_ce: f64,
    pub lambda_count: f64,
    /// Part count used when the gate is disabled; derived from the training
    /// set (rounded mean) when absent.
    pub fixed_part_count: Option<usize>,

    // Prototype bank.
    /// Number of prototypes `M`.
    pub num_prototypes: usize,
    /// Residual injection strength.
    pub beta: f64,
    pub lambda_ent: f64,
    pub lambda_flow: f64,
    pub prototype_init_std: f64,

    // Flow backbone.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Euler steps used by the sampler.
    pub steps: usize,

    // Optimisation.
    pub lr_codec: f64,
    pub lr_warmup: f64,
    pub lr_joint: f64,
    pub epochs_codec: usize,
    pub epochs_warmup: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    pub codec_batch_size: usize,
    pub seed: u64,

    // Ablations.
    pub disable_gate: bool,
    pub disable_bank: bool,
    pub disable_warmup: bool,
    /// Keep the first half of the backbone blocks frozen in the joint stage.
    pub freeze_first_half: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            min_parts: 2,
            max_parts: 6,
            points_per_part: 256,
            render_size: 32,
            train_objects: 512,
            test_objects: 64,
            iou_cap: 0.1,

            p_max: 8,
            tokens_per_part: 8,
            latent_dim: 32,
            codec_decoder_hidden: 512,
            latent_noise: 0.01,

            feature_dim: 128,
            view_hidden: 256,
            gate_hidden: 128,
            tau: 0.5,
            lambda_ce: 1.0,
            lambda_count: 0.1,
            fixed_part_count: None,

            num_prototypes: 12,
            beta: 0.1,
            lambda_ent: 0.01,
            lambda_flow: 1.0,
            prototype_init_std: 0.1,

            hidden: 128,
            blocks: 4,
            heads: 4,
            ff_mult: 2,
            steps: 32,

            lr_codec: 1e-3,
            lr_warmup: 1e-3,
            lr_joint: 3e-4,
            epochs_codec: 50,
            epochs_warmup: 30,
            epochs_joint: 80,
            batch_size: 16,
            codec_batch_size: 64,
            seed: 0,

            disable_gate: false,
            disable_bank: false,
            disable_warmup: false,
            freeze_first_half: false,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            min_parts: self.min_parts,
            max_parts: self.max_parts,
            p_max: self.p_max,
            points_per_part: self.points_per_part,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("points_per_part", self.points_per_part),
            ("render_size", self.render_size),
            ("p_max", self.p_max),
            ("tokens_per_part", self.tokens_per_part),
            ("latent_dim", self.latent_dim),
            ("codec_decoder_hidden", self.codec_decoder_hidden),
            ("feature_dim", self.feature_dim),
            ("view_hidden", self.view_hidden),
            ("gate_hidden", self.gate_hidden),
            ("num_prototypes", self.num_prototypes),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("codec_batch_size", self.codec_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.p_max > PART_COUNT_LIMIT {
            return Err(Error::Config(format!("p_max must not exceed {PART_COUNT_LIMIT}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        let non_negative = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_count", self.lambda_count),
            ("lambda_ent", self.lambda_ent),
            ("lambda_flow", self.lambda_flow),
            ("beta", self.beta),
            ("latent_noise", self.latent_noise),
            ("prototype_init_std", self.prototype_init_std),
            ("lr_codec", self.lr_codec),
            ("lr_warmup", self.lr_warmup),
            ("lr_joint", self.lr_joint),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.iou_cap > 0.0 && self.iou_cap <= 1.0) {
            return Err(Error::Config(format!("iou_cap must lie in (0, 1], got {}", self.iou_cap)));
        }
        if let Some(n) = self.fixed_part_count {
            if n == 0 || n > self.p_max {
                return Err(Error::Config(format!("fixed_part_count must lie in 1..={}", self.p_max)));
            }
        }
        self.generator_spec().validate()
    }
}
