//! HTTP sidecar and command line for step-wise failure detection.
//!
//! The sidecar receives agent segments as they complete, answers each with a
//! detection verdict, runs mitigation when a trace is finalized, and hosts the
//! expert review loop that grows the knowledge base.

pub mod api;
pub mod cli;
pub mod config;
pub mod runtime;
pub mod state;

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::router;
pub use config::{ConfigError, KbFlush, ServiceConfig};
pub use runtime::HttpAgentRuntime;
pub use state::{AppState, StateError};

/// Serves the API on `listener` until `shutdown` resolves. With
/// `kb_flush = manual` the knowledge base is saved on the way out.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if state.config.persistence.kb_flush == KbFlush::Manual {
        state.persist()?;
    }
    Ok(())
}
