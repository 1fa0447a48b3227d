use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no checkpoint loaded")]
    NoCheckpoint,
    #[error("scene {0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("another mutation is in flight for scene {0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] singrav::Error),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// JSON error body.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn status(&self) -> (StatusCode, &'static str) {
        use singrav::Error as E;
        match self {
            Self::NoCheckpoint => (StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint"),
            Self::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Self::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Self::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Self::Core(E::InvalidArgument(_) | E::ShapeMismatch { .. }) => {
                (StatusCode::BAD_REQUEST, "invalid_argument")
            }
            Self::Core(E::Unsupported(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "unsupported"),
            Self::Core(E::Precondition(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "precondition"),
            Self::Core(_) | Self::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code,
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}
