use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use al_core::classifier::ClassifierError;
use al_core::embed::EmbedError;
use al_core::evaluate::EvalError;
use al_core::rounds::LoopError;

/// Wire form of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<LoopError> for ApiError {
    fn from(e: LoopError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            LoopError::NotInitialized => (S::SERVICE_UNAVAILABLE, "not_initialized"),
            LoopError::AlreadyInitialized => (S::CONFLICT, "already_initialized"),
            LoopError::NoDataset => (S::CONFLICT, "no_dataset"),
            LoopError::PreviousIncomplete(_) => (S::CONFLICT, "previous_incomplete"),
            LoopError::NoPreviousRound => (S::CONFLICT, "no_previous_round"),
            LoopError::NoActiveRound => (S::CONFLICT, "no_active_round"),
            LoopError::WrongPhase { .. } => (S::CONFLICT, "wrong_phase"),
            LoopError::RoundComplete => (S::CONFLICT, "round_complete"),
            LoopError::QueueIncomplete { .. } => (S::CONFLICT, "queue_incomplete"),
            LoopError::ConflictPending { .. } => (S::CONFLICT, "conflict_pending"),
            LoopError::UnknownRecord(_) => (S::NOT_FOUND, "unknown_record"),
            LoopError::UnknownRound(_) => (S::NOT_FOUND, "unknown_round"),
            LoopError::UnknownCheckpoint(_) => (S::NOT_FOUND, "unknown_checkpoint"),
            LoopError::UnknownBatch(_) => (S::NOT_FOUND, "unknown_batch"),
            LoopError::DuplicateRecord(_) => (S::CONFLICT, "duplicate_record"),
            LoopError::Unlabeled(_) => (S::CONFLICT, "unlabeled"),
            LoopError::NoTopicModel => (S::CONFLICT, "no_topic_model"),
            LoopError::Eval(EvalError::LeakageDetected(_)) => {
                (S::UNPROCESSABLE_ENTITY, "leakage_detected")
            }
            e if e.is_invariant() => (S::UNPROCESSABLE_ENTITY, "invariant_violated"),
            LoopError::InvalidOption(_) => (S::BAD_REQUEST, "invalid_option"),
            LoopError::Augment(_) => (S::BAD_REQUEST, "invalid_edit"),
            LoopError::Embed(EmbedError::EmbedderUnavailable { .. })
            | LoopError::Classifier(ClassifierError::Backend(_)) => {
                (S::BAD_GATEWAY, "backend_unavailable")
            }
            LoopError::Locked(_) => (S::SERVICE_UNAVAILABLE, "store_locked"),
            e if e.is_io() => (S::INTERNAL_SERVER_ERROR, "store_error"),
            _ => (S::UNPROCESSABLE_ENTITY, "unprocessable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}
