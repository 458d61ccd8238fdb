use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which dimension sets the `1/sqrt(d)` scale of the dot-product relations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDim {
    /// Projected per-head width `d_model / heads`.
    #[default]
    Head,
    /// Raw input width (`d_v` for images, `d_t` for text).
    Input,
}

/// Parameter storage precision. Arithmetic always runs in 64-bit; `F32`
/// rounds parameters through `f32` after every update and stores 32-bit
/// reals in checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Model dimensions and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub lambda: f64,
    pub heads: usize,
    pub d_model: usize,
    pub d_p: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub d_t: usize,
    /// 0 means: infer from the caption file.
    pub vocab_size: usize,
    pub position_enabled: bool,
    pub scale_dim: ScaleDim,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of images held out for validation; 0 validates on the training set.
    pub val_fraction: f64,
    /// Epochs between validation passes; 0 disables validation.
    pub validate_every: usize,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            epochs: 25,
            batch_size: 128,
            margin: 0.2,
            lambda: 9.0,
            heads: 6,
            d_model: 252,
            d_p: 64,
            d_v: 2048,
            d_e: 300,
            d_t: 256,
            vocab_size: 0,
            position_enabled: true,
            scale_dim: ScaleDim::Head,
            seed: 0,
            precision: Precision::F32,
            grad_clip: 2.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.0,
            validate_every: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 {
            return fail("heads must be at least 1".into());
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        for (name, v) in [("d_p", self.d_p), ("d_v", self.d_v), ("d_e", self.d_e), ("d_t", self.d_t)] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 to have a negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
