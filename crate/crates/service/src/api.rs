//! Error responses and the validating JSON extractor.

use axum::body::Bytes;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gridfm_core::llm::GatewayError;
use gridfm_core::store::StoreError;
use gridfm_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// JSON error body: `{"error": ..., "path": ...}`.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            path: None,
        }
    }

    pub fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    pub fn conflict(error: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, error)
    }

    pub fn internal(error: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. }
            | Error::Infeasible(_)
            | Error::UnsupportedCost { .. }
            | Error::EmptyProblem
            | Error::InvalidInput(_)
            | Error::InsufficientData(_)
            | Error::ProblemFile(_) => StatusCode::BAD_REQUEST,
            Error::IllegalState(_) | Error::Cancelled => StatusCode::CONFLICT,
            Error::Step { .. } | Error::Gateway(_) => StatusCode::BAD_GATEWAY,
            Error::Store(StoreError::NotFound(_)) => StatusCode::NOT_FOUND,
            Error::ConvergenceFailure { .. } | Error::Store(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

/// JSON body whose deserialization errors name the offending field. An
/// empty body reads as `{}`.
pub struct Valid<T>(pub T);

impl<S, T> FromRequest<S> for Valid<T>
where
    S: Send + Sync,
    T: DeserializeOwned,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let slice: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { &bytes };
        let de = &mut serde_json::Deserializer::from_slice(slice);
        serde_path_to_error::deserialize(de).map(Valid).map_err(|e| {
            let path = e.path().to_string();
            ApiError {
                status: StatusCode::BAD_REQUEST,
                error: e.inner().to_string(),
                path: (path != ".").then_some(path),
            }
        })
    }
}
