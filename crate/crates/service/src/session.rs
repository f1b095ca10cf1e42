use axum::extract::FromRequestParts;
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use chrono::{DateTime, Utc};
use serde::Serialize;

use al_core::rounds::OracleKind;

use crate::{ApiError, AppState};

/// A caller authenticated by a static bearer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiSession {
    pub oracle_id: String,
    pub kind: OracleKind,
    #[serde(skip)]
    pub token: String,
    pub issued_at: DateTime<Utc>,
}

impl FromRequestParts<AppState> for ApiSession {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let unauthorized = |msg: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", msg);
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| unauthorized("missing bearer token"))?
            .to_str()
            .map_err(|_| unauthorized("malformed authorization header"))?;
        let token = value
            .strip_prefix("Bearer ")
            .ok_or_else(|| unauthorized("expected a bearer token"))?;
        state
            .0
            .sessions
            .iter()
            .find(|s| s.token == token)
            .cloned()
            .ok_or_else(|| unauthorized("unknown token"))
    }
}
