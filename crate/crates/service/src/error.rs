use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    OutOfBounds(String),
    #[error("no clicks to undo")]
    NothingToUndo,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::OutOfBounds(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NothingToUndo => StatusCode::CONFLICT,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<lyncean::Error> for ApiError {
    fn from(e: lyncean::Error) -> Self {
        match e {
            lyncean::Error::SeedOutOfBounds { .. } => Self::OutOfBounds(e.to_string()),
            lyncean::Error::Format(_) | lyncean::Error::Proposals(_) => Self::BadRequest(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
