//! HTTP facade over a project store.
//!
//! Every mutation goes through [`Project`], which appends to the event log
//! before the response is sent. A single `RwLock` serializes writers; readers
//! see the last committed state. Handlers run on the blocking pool because
//! training and prediction are CPU-bound.

mod error;
mod routes;
mod session;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use al_core::classifier::{ClassifierBackend, NativeBackend, RemoteBackend};
use al_core::rounds::{Clock, LoopError, OracleKind, Project};
use serde::{Deserialize, Serialize};
use url::Url;

pub use error::{ApiError, ErrorBody};
pub use routes::{AdvanceResponse, LabelRequest, RecordView, StartRound};
pub use session::ApiSession;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub token: String,
    pub oracle_id: String,
    #[serde(default = "human")]
    pub kind: OracleKind,
}

fn human() -> OracleKind {
    OracleKind::Human
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendConfig {
    Native,
    Remote { endpoint: Url },
}

impl BackendConfig {
    pub fn build(&self) -> Arc<dyn ClassifierBackend> {
        match self {
            BackendConfig::Native => Arc::new(NativeBackend),
            BackendConfig::Remote { endpoint } => Arc::new(RemoteBackend::new(endpoint.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub project_dir: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    pub tokens: Vec<TokenConfig>,
    #[serde(default = "native")]
    pub backend: BackendConfig,
    #[serde(default = "system_clock")]
    pub clock: Clock,
    /// Write a snapshot once this many events have accumulated since the last one.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn native() -> BackendConfig {
    BackendConfig::Native
}

fn system_clock() -> Clock {
    Clock::System
}

fn default_snapshot_every() -> u64 {
    1000
}

impl ServiceConfig {
    pub fn new(project_dir: impl Into<PathBuf>, tokens: Vec<TokenConfig>) -> Self {
        ServiceConfig {
            project_dir: project_dir.into(),
            bind: default_bind(),
            tokens,
            backend: BackendConfig::Native,
            clock: Clock::System,
            snapshot_every: default_snapshot_every(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ServiceError> {
        toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("cannot open project store: {0}")]
    Store(#[from] LoopError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
}

pub(crate) struct Shared {
    pub project: RwLock<Project>,
    pub sessions: Vec<ApiSession>,
    pub backend: Arc<dyn ClassifierBackend>,
    pub snapshot_every: u64,
    pub last_snapshot: RwLock<u64>,
}

/// Shared handle passed to every handler.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Shared>);

impl AppState {
    /// Open the store named in `config`.
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        if config.tokens.is_empty() {
            return Err(ServiceError::Config(
                "at least one token is required".into(),
            ));
        }
        let project = Project::open(&config.project_dir, config.clock)?;
        Ok(Self::with_project(project, config))
    }

    pub fn with_project(project: Project, config: &ServiceConfig) -> Self {
        let issued_at = chrono::Utc::now();
        let sessions = config
            .tokens
            .iter()
            .map(|t| ApiSession {
                oracle_id: t.oracle_id.clone(),
                kind: t.kind,
                token: t.token.clone(),
                issued_at,
            })
            .collect();
        let last = project.state().last_seq;
        AppState(Arc::new(Shared {
            project: RwLock::new(project),
            sessions,
            backend: config.backend.build(),
            snapshot_every: config.snapshot_every.max(1),
            last_snapshot: RwLock::new(last),
        }))
    }

    /// Run `f` against the project on the blocking pool.
    pub fn read<T, F>(&self, f: F) -> impl std::future::Future<Output = Result<T, ApiError>>
    where
        T: Send + 'static,
        F: FnOnce(&Project) -> Result<T, ApiError> + Send + 'static,
    {
        let shared = self.0.clone();
        async move {
            tokio::task::spawn_blocking(move || {
                let project = shared.project.read().map_err(|_| poisoned())?;
                f(&project)
            })
            .await
            .map_err(|e| {
                ApiError::new(
                    axum::http::StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    e.to_string(),
                )
            })?
        }
    }

    /// Run a mutation on the blocking pool, snapshotting when due.
    pub fn write<T, F>(&self, f: F) -> impl std::future::Future<Output = Result<T, ApiError>>
    where
        T: Send + 'static,
        F: FnOnce(&mut Project, &dyn ClassifierBackend) -> Result<T, ApiError> + Send + 'static,
    {
        let shared = self.0.clone();
        async move {
            tokio::task::spawn_blocking(move || {
                let mut project = shared.project.write().map_err(|_| poisoned())?;
                let out = f(&mut project, shared.backend.as_ref());
                let seq = project.state().last_seq;
                let mut last = shared.last_snapshot.write().map_err(|_| poisoned())?;
                if seq.saturating_sub(*last) >= shared.snapshot_every {
                    match project.snapshot() {
                        Ok(_) => *last = seq,
                        Err(e) => tracing::warn!(error = %e, "snapshot failed"),
                    }
                }
                out
            })
            .await
            .map_err(|e| {
                ApiError::new(
                    axum::http::StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    e.to_string(),
                )
            })?
        }
    }
}

fn poisoned() -> ApiError {
    ApiError::new(
        axum::http::StatusCode::INTERNAL_SERVER_ERROR,
        "internal",
        "project lock poisoned by an earlier panic",
    )
}

pub fn router(state: AppState) -> axum::Router {
    routes::router(state)
}

/// Bind and serve until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::open(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.bind,
            source,
        })?;
    tracing::info!(addr = %config.bind, dir = %config.project_dir.display(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)
}
