use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use tapid_core::audit::{AuditError, TimeParseError};
use tapid_core::capture::CaptureError;
use tapid_core::config::ConfigError;
use tapid_core::plugin::PluginError;
use tapid_core::SessionError;

/// Error body: `{"error": {"code": "...", "message": "..."}}`. Codes are
/// stable strings; messages are for people.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn no_session() -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "NoActiveSession",
            "no session is active",
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::Plugin(PluginError::UnknownPlugin(_)) | SessionError::UnknownRun(_) => {
                StatusCode::NOT_FOUND
            }
            SessionError::Plugin(_) => StatusCode::BAD_REQUEST,
            SessionError::Audit(AuditError::MissingTimeAnchor) => StatusCode::BAD_REQUEST,
            SessionError::Audit(AuditError::UnreadableLog(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Audit(AuditError::StorageFailure(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            SessionError::RunStillActive(_) | SessionError::RelevanceAlreadyMarked(_) => {
                StatusCode::CONFLICT
            }
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        SessionError::from(e).into()
    }
}

impl From<CaptureError> for ApiError {
    fn from(e: CaptureError) -> Self {
        let status = match &e {
            CaptureError::InvalidSnapLength(_) => StatusCode::BAD_REQUEST,
            CaptureError::PermissionDenied(_) => StatusCode::FORBIDDEN,
            CaptureError::Unsupported => StatusCode::NOT_IMPLEMENTED,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidProfile", e.to_string())
    }
}

impl From<TimeParseError> for ApiError {
    fn from(e: TimeParseError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidTime", e.to_string())
    }
}
