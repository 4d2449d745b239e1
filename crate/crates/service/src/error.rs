use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chronicle_core::model::ModelError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("token {position} ({spelling:?}) is malformed: {reason}")]
    MalformedToken { position: usize, spelling: String, reason: String },
    #[error("token {position} ({spelling:?}) is not in the model vocabulary")]
    UnknownToken { position: usize, spelling: String },
    #[error("{0}")]
    BadRequest(String),
    #[error("sequence of {len} tokens exceeds the context of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::MalformedToken { .. } => "malformed_token",
            ServiceError::UnknownToken { .. } => "unknown_token",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::SequenceTooLong { .. } => "sequence_too_long",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::SequenceTooLong { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl From<ModelError> for ServiceError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::SequenceTooLong { len, max } => ServiceError::SequenceTooLong { len, max },
            ModelError::EmptySequence | ModelError::InvalidConfig(_) | ModelError::IndexOutOfVocab { .. } => {
                ServiceError::BadRequest(e.to_string())
            }
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code().to_string(), detail: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
