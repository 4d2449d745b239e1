//! TOML run configuration. Every section is optional; flags override it.

use std::path::Path;

use anyhow::Context;
use chronicle_core::metrics::EvalConfig;
use chronicle_core::synthgen::SynthParams;
use chronicle_core::{BuildConfig, ModelConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random component unless `--seed` is given.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub synth: SynthParams,
    pub build: BuildConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let invalid = |e: String| UsageError(format!("invalid config {}: {e}", path.display()));
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        let raw: toml::Table = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        let given = serde_json::to_value(raw)?;
        if let Some(key) = unknown_key(&given, &cfg.to_json()?, "") {
            return Err(invalid(format!("unknown key `{key}`")).into());
        }
        Ok(cfg)
    }

    /// Pushes one seed into every seeded section.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.train.seed = s;
            self.sampler.seed = s;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_json(&self) -> anyhow::Result<serde_json::Value> {
        serde_json::to_value(self).context("serialising resolved config")
    }
}

/// First key present in `given` but absent from the resolved config.
fn unknown_key(given: &serde_json::Value, resolved: &serde_json::Value, prefix: &str) -> Option<String> {
    let (Some(given), Some(resolved)) = (given.as_object(), resolved.as_object()) else {
        return None;
    };
    given.iter().find_map(|(k, v)| {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match resolved.get(k) {
            None => Some(path),
            Some(r) => unknown_key(v, r, &path),
        }
    })
}
