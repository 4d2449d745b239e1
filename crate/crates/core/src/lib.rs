//! Core library for turning timestamped concept streams into token timelines,
//! training a causal transformer over them, and scoring its forecasts.
//!
//! The modules mirror the pipeline stages:
//!
//! - [`ontology`]: concept vocabulary, concept types and the parent hierarchy
//! - [`timeline`]: event aggregation, frequency filters and timeline enrichment
//! - [`model`]: decoder-only transformer with hand-written backpropagation
//! - [`metrics`]: time-windowed, type- and novelty-filtered precision/recall
//! - [`synthgen`]: synthetic populations from a known Markov process

pub mod metrics;
pub mod model;
pub mod ontology;
pub mod synthgen;
pub mod timeline;

pub use model::{Model, ModelConfig, SamplerConfig, TrainConfig, Vocab};
pub use ontology::{ConceptId, ConceptType, Ontology};
pub use timeline::{AnnotationEvent, BuildConfig, Demographics, PatientRecord, Timeline, Token};
