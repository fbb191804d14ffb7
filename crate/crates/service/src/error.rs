use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use nestdiff_core::Error;
use serde_json::json;

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    /// Another mutation of the same session is still running.
    Busy,
    Capacity(usize),
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) | ApiError::Busy => StatusCode::CONFLICT,
            ApiError::Capacity(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn message(&self) -> String {
        match self {
            ApiError::NotFound(id) => format!("no session {id}"),
            ApiError::BadRequest(m) | ApiError::Conflict(m) | ApiError::Internal(m) => m.clone(),
            ApiError::Busy => "another request is mutating this session".into(),
            ApiError::Capacity(n) => format!("session capacity of {n} reached"),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Param(_) | Error::Config(_) => ApiError::BadRequest(e.to_string()),
            Error::State(_) | Error::NoPrediction => ApiError::Conflict(e.to_string()),
            Error::Numeric(_) | Error::Io(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.message() }))).into_response()
    }
}
