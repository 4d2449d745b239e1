//! Request and response bodies of the `/v1` endpoints.

use chronicle_core::metrics::Novelty;
use chronicle_core::{ConceptId, ConceptType, SamplerConfig};
use serde::{Deserialize, Serialize};

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    /// Timeline token spellings, oldest first.
    pub tokens: Vec<String>,
    #[serde(default, rename = "type")]
    pub concept_type: Option<ConceptType>,
    #[serde(default)]
    pub novelty: Option<Novelty>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCandidate {
    pub concept: ConceptId,
    pub token: String,
    pub name: String,
    #[serde(rename = "type")]
    pub concept_type: ConceptType,
    pub probability: f64,
    pub novelty: Novelty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub candidates: Vec<ForecastCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: Vec<String>,
    #[serde(flatten)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Prompt,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedItem {
    pub token: String,
    /// Concept name for concept tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub items: Vec<GeneratedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRequest {
    pub tokens: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResponse {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabQuery {
    #[serde(default)]
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabHit {
    pub token: String,
    pub concept: ConceptId,
    pub name: String,
    #[serde(rename = "type")]
    pub concept_type: ConceptType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabResponse {
    pub hits: Vec<VocabHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
    pub vocab_size: usize,
    pub context_len: usize,
}
