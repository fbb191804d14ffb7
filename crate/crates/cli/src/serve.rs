use nestdiff_service::{AppState, ServiceConfig};
use tokio::net::TcpListener;

use crate::setup;
use crate::{config_err, runtime_err, CliResult, Common};

pub fn run(common: &Common, bind: &str, max_sessions: usize, event_log: bool) -> CliResult<()> {
    if max_sessions == 0 {
        return Err(config_err("--max-sessions must be at least 1"));
    }
    let loaded = setup::load(common)?;
    let event_log_dir = if event_log {
        let dir = loaded.out_dir()?.join("sessions");
        std::fs::create_dir_all(&dir).map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))?;
        Some(dir)
    } else {
        None
    };
    let config = ServiceConfig {
        max_sessions,
        event_log_dir,
        default_prior: Some(loaded.prior),
        default_schedule: loaded.config.schedule,
        ..ServiceConfig::default()
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let runtime = tokio::runtime::Runtime::new().map_err(runtime_err)?;
    runtime.block_on(async move {
        let listener = TcpListener::bind(bind).await.map_err(|e| runtime_err(format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(runtime_err)?;
        println!("listening on http://{addr}");
        nestdiff_service::serve(listener, AppState::new(config), shutdown_signal()).await.map_err(runtime_err)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
