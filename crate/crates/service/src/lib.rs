//! JSON-over-HTTP front end for a trained model.
//!
//! Every handler is a pure function of the loaded artifact and the request
//! body; [`Service`] exposes the same computations without HTTP.

pub mod api;
mod error;

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{FromRequest, Query, Request, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use chronicle_core::metrics::{candidate_filter, ConceptIndex, Novelty};
use chronicle_core::model::{load_model, model_version, ModelError, PAD, UNK};
use chronicle_core::ontology::OntologyError;
use chronicle_core::{ConceptId, Model, Ontology, Token};
use serde::de::DeserializeOwned;

pub use api::*;
pub use error::{ErrorBody, ServiceError};

pub const BIND_ENV: &str = "CHRONICLE_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const MAX_K: usize = 100;
pub const MAX_VOCAB_HITS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot load model: {0}")]
    Model(#[from] ModelError),
    #[error("cannot load ontology: {0}")]
    Ontology(#[from] OntologyError),
}

/// A loaded model plus everything needed to answer requests against it.
#[derive(Debug)]
pub struct Service {
    model: Model,
    ontology: Ontology,
    index: ConceptIndex,
    version: String,
}

impl Service {
    pub fn new(mut model: Model, ontology: Ontology) -> Service {
        model.vocab.annotate_types(&ontology);
        let index = ConceptIndex::new(&model.vocab, &ontology);
        let version = model_version(&model);
        Service { model, ontology, index, version }
    }

    pub fn load(model_dir: impl AsRef<Path>, ontology_path: impl AsRef<Path>) -> Result<Service, LoadError> {
        let model = load_model(model_dir)?;
        let ontology = Ontology::load_path(ontology_path)?;
        Ok(Service::new(model, ontology))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            model_version: self.version.clone(),
            vocab_size: self.model.vocab.len(),
            context_len: self.model.config().context_len,
        }
    }

    /// Maps spellings to vocabulary indices, reporting the first bad position.
    pub fn encode(&self, spellings: &[String]) -> Result<Vec<u32>, ServiceError> {
        if spellings.is_empty() {
            return Err(ServiceError::BadRequest("token list is empty".into()));
        }
        let max = self.model.config().context_len;
        if spellings.len() > max {
            return Err(ServiceError::SequenceTooLong { len: spellings.len(), max });
        }
        spellings.iter().enumerate().map(|(i, s)| self.encode_one(i, s)).collect()
    }

    fn encode_one(&self, position: usize, spelling: &str) -> Result<u32, ServiceError> {
        let token: Token = spelling.parse().map_err(|e: chronicle_core::timeline::TokenParseError| {
            ServiceError::MalformedToken { position, spelling: spelling.to_string(), reason: e.to_string() }
        })?;
        match self.model.vocab.lookup(&token.to_string()) {
            Some(i) if i != PAD && i != UNK => Ok(i),
            _ => Err(ServiceError::UnknownToken { position, spelling: spelling.to_string() }),
        }
    }

    fn name_of(&self, c: &ConceptId) -> String {
        self.ontology.get(c).map(|i| i.name.clone()).unwrap_or_default()
    }

    pub fn forecast(&self, req: &ForecastRequest) -> Result<ForecastResponse, ServiceError> {
        if !(1..=MAX_K).contains(&req.k) {
            return Err(ServiceError::BadRequest(format!("k must lie in 1..={MAX_K}, got {}", req.k)));
        }
        let tokens = self.encode(&req.tokens)?;
        let dist = self.model.next_distribution(&tokens)?;
        let history: HashSet<ConceptId> = tokens
            .iter()
            .filter_map(|&i| self.model.vocab.token(i)?.concept().cloned())
            .collect();
        let candidates = candidate_filter(&dist, &self.index, req.concept_type, req.novelty, &history, req.k)
            .into_iter()
            .map(|c| ForecastCandidate {
                token: self.model.vocab.spelling(c.index).to_string(),
                name: self.name_of(&c.concept),
                novelty: Novelty::of(history.contains(&c.concept)),
                concept: c.concept,
                concept_type: c.concept_type,
                probability: c.probability,
            })
            .collect();
        Ok(ForecastResponse { candidates })
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ServiceError> {
        let prompt = self.encode(&req.prompt)?;
        let g = self.model.generate(&prompt, &req.sampler)?;
        let items = g
            .tokens
            .iter()
            .map(|t| GeneratedItem {
                token: self.model.vocab.spelling(t.index).to_string(),
                name: self.model.vocab.token(t.index).and_then(Token::concept).map(|c| self.name_of(c)),
                source: if t.generated { Source::Generated } else { Source::Prompt },
            })
            .collect();
        Ok(GenerateResponse { items })
    }

    pub fn saliency(&self, req: &SaliencyRequest) -> Result<SaliencyResponse, ServiceError> {
        let tokens = self.encode(&req.tokens)?;
        let target = self.encode_one(req.tokens.len(), &req.target)?;
        let scores = self.model.saliency(&tokens, target)?;
        Ok(SaliencyResponse { tokens: req.tokens.clone(), scores })
    }

    /// Concepts whose name or id contains `query`, case-insensitively, in
    /// vocabulary order.
    pub fn vocab(&self, query: &str) -> VocabResponse {
        let needle = query.to_lowercase();
        let hits = (0..self.model.vocab.len() as u32)
            .filter_map(|i| {
                let (concept, ty) = self.index.get(i)?;
                let name = self.name_of(concept);
                let matched =
                    name.to_lowercase().contains(&needle) || concept.as_str().to_lowercase().contains(&needle);
                matched.then(|| VocabHit {
                    token: self.model.vocab.spelling(i).to_string(),
                    concept: concept.clone(),
                    name,
                    concept_type: *ty,
                })
            })
            .take(MAX_VOCAB_HITS)
            .collect();
        VocabResponse { hits }
    }
}

/// JSON body extractor whose rejections use the service error shape.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|e| ServiceError::BadRequest(e.body_text()))
    }
}

type Shared = Arc<Service>;

async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> Result<R, ServiceError> + Send + 'static,
) -> Result<Json<R>, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

async fn forecast(State(s): State<Shared>, ApiJson(req): ApiJson<ForecastRequest>) -> Result<Json<ForecastResponse>, ServiceError> {
    blocking(move || s.forecast(&req)).await
}

async fn generate(State(s): State<Shared>, ApiJson(req): ApiJson<GenerateRequest>) -> Result<Json<GenerateResponse>, ServiceError> {
    blocking(move || s.generate(&req)).await
}

async fn saliency(State(s): State<Shared>, ApiJson(req): ApiJson<SaliencyRequest>) -> Result<Json<SaliencyResponse>, ServiceError> {
    blocking(move || s.saliency(&req)).await
}

async fn vocab(State(s): State<Shared>, Query(q): Query<VocabQuery>) -> Json<VocabResponse> {
    Json(s.vocab(&q.query))
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    Json(s.health())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/forecast", post(forecast))
        .route("/v1/generate", post(generate))
        .route("/v1/saliency", post(saliency))
        .route("/v1/vocab", get(vocab))
        .route("/v1/health", get(health))
        .with_state(service)
}

/// Flag first, then the environment value, then [`DEFAULT_BIND`].
pub fn resolve_bind(flag: Option<&str>, env: Option<&str>) -> String {
    flag.or(env).filter(|s| !s.is_empty()).unwrap_or(DEFAULT_BIND).to_string()
}

/// Serves until ctrl-c.
pub async fn serve(service: Service, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(service)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
