//! Decoder-only transformer over timeline tokens.
//!
//! [`Network`] is generic over the float type so gradients can be checked in
//! f64; [`Model`] pairs an f32 network with its vocabulary and is what gets
//! trained, saved and served.

mod artifact;
mod config;
mod network;
pub mod ops;
mod sample;
mod train;
mod vocab;

pub use artifact::{load_model, model_version, save_model, FORMAT_VERSION};
pub use config::{ModelConfig, SamplerConfig, Schedule, TrainConfig};
pub use network::{Batch, DecodeState, Gradients, Layout, Network, TensorSpec};
pub(crate) use network::mix;
pub use sample::{GeneratedToken, Generation};
pub use train::{encode_corpus, train, AdamW, TrainHistory};
pub use vocab::{Vocab, VocabEntry, PAD, PAD_SPELLING, UNK, UNK_SPELLING};

use thiserror::Error;

use crate::timeline::{Timeline, Token};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token index {index} outside vocabulary of {vocab}")]
    IndexOutOfVocab { index: u32, vocab: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameters became non-finite during training")]
    NonFinite,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("artifact format version {found} is newer than supported version {supported}")]
    FormatVersionMismatch { found: u32, supported: u32 },
    #[error("weights checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed artifact: {0}")]
    Format(String),
}

/// A trained (or freshly initialised) network with its vocabulary.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network<f32>,
    pub vocab: Vocab,
    pub train_config: Option<TrainConfig>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model, ModelError> {
        let network = Network::new(config, vocab.len(), seed)?;
        Ok(Model { network, vocab, train_config: None })
    }

    /// Builds the vocabulary from `corpus` and initialises a network for it.
    pub fn for_corpus(config: ModelConfig, corpus: &[Timeline], seed: u64) -> Result<Model, ModelError> {
        Model::new(config, Vocab::build(corpus)?, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|t| self.vocab.encode(t)).collect()
    }

    /// Logits `[len, V]`, row-major.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        self.network.forward(tokens)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        self.network.loss(batch)
    }

    pub fn gradients(&self, batch: &Batch) -> Result<Gradients<f32>, ModelError> {
        Ok(self.network.loss_and_gradients(batch)?.1)
    }

    /// Distribution over the vocabulary for the token after `prefix`.
    pub fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let logits = self.forward(prefix)?;
        let v = self.vocab.len();
        Ok(ops::softmax_row(&logits[logits.len() - v..]))
    }

    /// Row `j` is the next-token distribution after `tokens[..=j]`; identical
    /// to `next_distribution(&tokens[..=j])`.
    pub fn sequence_distributions(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let logits = self.forward(tokens)?;
        Ok(logits.chunks_exact(self.vocab.len()).map(ops::softmax_row).collect())
    }

    pub fn saliency(&self, prefix: &[u32], target: u32) -> Result<Vec<f64>, ModelError> {
        self.network.saliency(prefix, target)
    }

    pub fn generate(&self, prompt: &[u32], sc: &SamplerConfig) -> Result<Generation, ModelError> {
        sample::generate(self, prompt, sc)
    }
}
