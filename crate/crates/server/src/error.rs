use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use latentprobe::ProbeError;
use serde_json::json;

/// Request failures with a machine-readable `error` code in the body.
#[derive(Debug)]
pub enum ApiError {
    UnknownModel(String),
    UnknownWord(String),
    BadRange { a: f64, b: f64 },
    DimensionOutOfRange { dim: usize, latent_dim: usize },
    ZeroSemanticDirection { word1: String, word2: String },
    BadRequest(String),
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownModel(_) => "unknown_model",
            ApiError::UnknownWord(_) => "unknown_word",
            ApiError::BadRange { .. } => "bad_range",
            ApiError::DimensionOutOfRange { .. } => "dim_out_of_range",
            ApiError::ZeroSemanticDirection { .. } => "zero_semantic_direction",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownModel(_) | ApiError::UnknownWord(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl From<ProbeError> for ApiError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::UnknownWord(w) => ApiError::UnknownWord(w),
            ProbeError::DimensionOutOfRange { dim, latent_dim } => {
                ApiError::DimensionOutOfRange { dim, latent_dim }
            }
            ProbeError::ZeroSemanticDirection { w1, w2 } => ApiError::ZeroSemanticDirection {
                word1: w1,
                word2: w2,
            },
            ProbeError::EmptyRange { a, b } => ApiError::BadRange { a, b },
            e @ ProbeError::InvalidCount { .. } => ApiError::BadRequest(e.to_string()),
            e => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.code();
        let body = match &self {
            ApiError::UnknownModel(id) => json!({ "error": code, "model": id }),
            ApiError::UnknownWord(word) => json!({ "error": code, "word": word }),
            ApiError::BadRange { a, b } => json!({ "error": code, "range": [a, b] }),
            ApiError::DimensionOutOfRange { dim, latent_dim } => {
                json!({ "error": code, "dim": dim, "latent_dim": latent_dim })
            }
            ApiError::ZeroSemanticDirection { word1, word2 } => {
                json!({ "error": code, "word1": word1, "word2": word2 })
            }
            ApiError::BadRequest(message) | ApiError::Internal(message) => {
                json!({ "error": code, "message": message })
            }
        };
        (self.status(), Json(body)).into_response()
    }
}
