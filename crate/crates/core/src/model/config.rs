use serde::{Deserialize, Serialize};

use super::ModelError;

/// Transformer shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embedding_dim: usize,
    pub context_len: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale shape. The context fits a default 256-concept fragment
    /// with its separators and markers (2·256 + 8).
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            embedding_dim: 64,
            context_len: 520,
            feedforward_dim: 256,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// 16 layers × 16 heads × 512 dimensions.
    pub fn full_scale() -> Self {
        ModelConfig {
            n_layers: 16,
            n_heads: 16,
            embedding_dim: 512,
            context_len: 520,
            feedforward_dim: 2048,
            dropout: 0.1,
        }
    }

    /// Smallest context that holds a fragment of `max_concepts` concepts.
    pub fn context_for(max_concepts: usize) -> usize {
        2 * max_concepts + 8
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.embedding_dim == 0 {
            return bad("layers, heads and embedding_dim must be positive".into());
        }
        if self.embedding_dim % self.n_heads != 0 {
            return bad(format!(
                "embedding_dim {} is not divisible by n_heads {}",
                self.embedding_dim, self.n_heads
            ));
        }
        if self.context_len == 0 || self.feedforward_dim == 0 {
            return bad("context_len and feedforward_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Checks the context against the fragment bound used to build timelines.
    pub fn check_pairing(&self, max_concepts: usize) -> Result<(), ModelError> {
        let need = Self::context_for(max_concepts);
        if self.context_len < need {
            return Err(ModelError::InvalidConfig(format!(
                "context_len {} is below {} required for fragments of {} concepts",
                self.context_len, need, max_concepts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3.14e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            warmup_ratio: 0.01,
            epochs: 10,
            seed: 0,
            schedule: Schedule::Linear,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) of `total`: linear
    /// warmup over the first `ceil(warmup_ratio · total)` steps, then linear
    /// decay reaching zero after the last step.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_ratio * total as f64).ceil() as usize;
        match self.schedule {
            Schedule::Linear => {
                if step < warmup {
                    self.learning_rate * (step + 1) as f64 / warmup as f64
                } else {
                    let remaining = total.saturating_sub(step) as f64;
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    self.learning_rate * (remaining / span).clamp(0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Upper bound on generated tokens of any kind.
    pub max_new_tokens: usize,
    /// Optional bound on generated concept tokens; generation stops when reached.
    pub max_new_concepts: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 100,
            temperature: 1.0,
            seed: 0,
            max_new_tokens: 64,
            max_new_concepts: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.top_k == 0 {
            return Err(ModelError::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}
