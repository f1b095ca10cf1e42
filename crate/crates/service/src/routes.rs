use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use al_core::augment::CounterfactualPair;
use al_core::evaluate::ReportRow;
use al_core::rounds::{
    Conflict, CounterfactualRequest, LabelAck, LabelEntry, Phase, QueueItem, RoundMode,
    RoundOptions, RoundState, Status,
};
use al_core::sampler::Strategy;
use al_core::{Label, RecordId, TriageRecord};

use crate::{ApiError, ApiSession, AppState};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/rounds", get(list_rounds).post(start_round))
        .route("/rounds/{id}/advance", post(advance))
        .route("/queue/next", get(queue_next))
        .route("/labels", post(submit_label))
        .route("/counterfactuals", post(author_counterfactual))
        .route("/metrics", get(metrics))
        .route("/records/{id}", get(record))
        .route("/status", get(status))
        .route("/conflicts", get(conflicts))
        .with_state(state)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(params: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    params
        .map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn list_rounds(
    State(state): State<AppState>,
    _: ApiSession,
) -> Result<Json<Vec<RoundState>>, ApiError> {
    state.read(|p| Ok(p.state().rounds.clone())).await.map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRound {
    pub mode: RoundMode,
    #[serde(default)]
    pub config: RoundOptions,
}

async fn start_round(
    State(state): State<AppState>,
    _: ApiSession,
    payload: Result<Json<StartRound>, JsonRejection>,
) -> Result<(StatusCode, Json<RoundState>), ApiError> {
    let req = body(payload)?;
    let round = state
        .write(move |p, _| {
            let n = p.start_round(req.mode, req.config)?;
            Ok(p.state().rounds[n as usize - 1].clone())
        })
        .await?;
    Ok((StatusCode::CREATED, Json(round)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub round: u32,
    pub phase: Phase,
}

async fn advance(
    State(state): State<AppState>,
    _: ApiSession,
    Path(id): Path<u32>,
) -> Result<Json<AdvanceResponse>, ApiError> {
    state
        .write(move |p, backend| {
            let current = p.state().current_round().map(|r| r.round);
            if current != Some(id) {
                return Err(if p.state().rounds.iter().any(|r| r.round == id) {
                    ApiError::new(
                        StatusCode::CONFLICT,
                        "not_current_round",
                        format!("round {id} is not the current round"),
                    )
                } else {
                    ApiError::not_found("unknown_round", format!("unknown round {id}"))
                });
            }
            let phase = p.advance(backend)?;
            Ok(AdvanceResponse { round: id, phase })
        })
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    strategy: Option<Strategy>,
}

async fn queue_next(
    State(state): State<AppState>,
    _: ApiSession,
    params: Result<Query<QueueParams>, QueryRejection>,
) -> Result<Json<Option<QueueItem>>, ApiError> {
    let strategy = query(params)?.strategy;
    state
        .read(move |p| Ok(p.queue_next(strategy)))
        .await
        .map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub record_id: RecordId,
    pub label: Label,
    pub oracle_id: String,
}

async fn submit_label(
    State(state): State<AppState>,
    session: ApiSession,
    payload: Result<Json<LabelRequest>, JsonRejection>,
) -> Result<Json<LabelAck>, ApiError> {
    let req = body(payload)?;
    if req.oracle_id != session.oracle_id {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "oracle_mismatch",
            format!("this token labels as {}", session.oracle_id),
        ));
    }
    if req.label == Label::Unlabeled {
        return Err(ApiError::bad_request("label must be positive or negative"));
    }
    state
        .write(move |p, _| {
            Ok(p.submit_label(&req.record_id, req.label, &req.oracle_id, session.kind)?)
        })
        .await
        .map(Json)
}

async fn author_counterfactual(
    State(state): State<AppState>,
    _: ApiSession,
    payload: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CounterfactualPair>), ApiError> {
    let req = body(payload)?;
    let pair = state
        .write(move |p, _| Ok(p.author_counterfactual(&req)?))
        .await?;
    Ok((StatusCode::CREATED, Json(pair)))
}

#[derive(Debug, Deserialize)]
struct MetricParams {
    round: Option<u32>,
    beta: Option<f64>,
}

async fn metrics(
    State(state): State<AppState>,
    _: ApiSession,
    params: Result<Query<MetricParams>, QueryRejection>,
) -> Result<Json<ReportRow>, ApiError> {
    let params = query(params)?;
    if params.beta.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
        return Err(ApiError::bad_request("beta must be a positive number"));
    }
    state
        .read(move |p| {
            let round = params
                .round
                .or_else(|| {
                    p.state()
                        .rounds
                        .iter()
                        .rev()
                        .find(|r| r.report.is_some())
                        .map(|r| r.round)
                })
                .ok_or_else(|| ApiError::not_found("no_report", "no round has a report yet"))?;
            let beta = params.beta.unwrap_or(p.config().beta);
            p.metrics(round, beta).ok_or_else(|| {
                ApiError::not_found("no_report", format!("round {round} has no report"))
            })
        })
        .await
        .map(Json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub record: TriageRecord,
    pub label: Option<LabelEntry>,
    pub counterfactual: Option<CounterfactualPair>,
}

async fn record(
    State(state): State<AppState>,
    _: ApiSession,
    Path(id): Path<String>,
) -> Result<Json<RecordView>, ApiError> {
    let id = RecordId(id);
    state
        .read(move |p| {
            let s = p.state();
            let record = s.records.get(&id).cloned().ok_or_else(|| {
                ApiError::not_found("unknown_record", format!("unknown record {id}"))
            })?;
            Ok(RecordView {
                record,
                label: s.labels.entries.get(&id).cloned(),
                counterfactual: s.counterfactuals.get(&id).cloned(),
            })
        })
        .await
        .map(Json)
}

async fn status(State(state): State<AppState>, _: ApiSession) -> Result<Json<Status>, ApiError> {
    state.read(|p| Ok(p.status())).await.map(Json)
}

async fn conflicts(
    State(state): State<AppState>,
    _: ApiSession,
) -> Result<Json<Vec<Conflict>>, ApiError> {
    state.read(|p| Ok(p.conflicts())).await.map(Json)
}
