//! HTTP front end for the rating loop: song library, blinded generation
//! sessions, rating submission, per-version metrics and admin retraining.

pub mod config;
pub mod error;
mod routes;
mod state;

use std::net::SocketAddr;
use std::time::Duration;

pub use config::ServiceConfig;
pub use error::{ApiError, ConfigError};
pub use routes::{router, Generated, MetricsReport, RatingAccepted, SessionCreated, SongSummary, VersionReport};
pub use state::{system_clock, ApiSession, AppState, Clock, RetrainState};

/// Binds and serves until interrupted or terminated. Expired sessions are
/// swept once a minute.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let cfg = state.config();
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60));
            loop {
                tick.tick().await;
                let s = state.clone();
                match tokio::task::spawn_blocking(move || s.sweep_expired()).await {
                    Ok(Ok(0)) => {}
                    Ok(Ok(n)) => log::info!("closed {n} expired sessions"),
                    Ok(Err(e)) => log::warn!("session sweep failed: {}", e.message),
                    Err(e) => log::warn!("session sweep failed: {e}"),
                }
            }
        })
    };
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown())
        .await;
    sweeper.abort();
    log::info!("stopped");
    result
}

async fn shutdown() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {}
        _ = terminate => {}
    }
}
