//! JSON-over-HTTP backend for the workbench: sessions holding a workspace
//! sequence, training jobs run one at a time on a dedicated worker with
//! NDJSON progress streams, activation retrieval and progression history.

pub mod api;
pub mod events;
pub mod state;

use std::future::Future;
use std::net::SocketAddr;

use tokio::net::TcpListener;

pub use api::router;
pub use events::{Event, JobState};
pub use state::{AppState, HistoryEntry};

/// Binds `addr` and serves until `shutdown` resolves; see [`serve_on`].
pub async fn serve(
    state: AppState,
    addr: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    serve_on(state, listener, shutdown).await?;
    Ok(bound)
}

/// Serves on `listener` until `shutdown` resolves, then writes the session
/// snapshot if one is configured.
pub async fn serve_on(
    state: AppState,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(path) = state.save_snapshot()? {
        log::info!("sessions saved to {}", path.display());
    }
    Ok(())
}
