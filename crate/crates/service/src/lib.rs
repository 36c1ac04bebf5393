//! HTTP backend for similarity search and collaborative labeling sessions.

mod api;
mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use curare_core::active::LoopConfig;
use curare_core::index::VectorIndex;

pub use api::router;
pub use error::ApiError;
pub use session::{
    BatchItem, BatchView, CuratedEntry, LabelEntry, Progress, Session, StatusView, SubmitOutcome,
    LABEL_LOG_FILE, SNAPSHOT_FILE,
};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Loop settings that request overrides are applied to.
    pub base_loop: LoopConfig,
    /// Directory that item uris are resolved against for `/images`.
    pub images_root: Option<PathBuf>,
    /// Built UI assets served under `/`.
    pub ui_dir: Option<PathBuf>,
    /// Where sessions are persisted; in-memory only when absent.
    pub state_dir: Option<PathBuf>,
}

pub struct AppState {
    pub index: Arc<VectorIndex>,
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    /// Builds the state and reloads every persisted session.
    pub fn new(index: Arc<VectorIndex>, config: ServiceConfig) -> Result<Self, ApiError> {
        let mut sessions = HashMap::new();
        if let Some(root) = &config.state_dir {
            std::fs::create_dir_all(root)?;
            for entry in std::fs::read_dir(root)? {
                let dir = entry?.path();
                if !dir.join(SNAPSHOT_FILE).exists() {
                    continue;
                }
                let s = Session::load(&dir, &index)?;
                log::info!(
                    "resumed session {} in phase {}",
                    s.id,
                    s.state().phase.as_str()
                );
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            index,
            config,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    /// Starts a session for `starter_id` with `overrides` merged onto the
    /// base loop config. Blocks while the seed set is built.
    pub fn create_session(
        &self,
        starter_id: &str,
        overrides: &serde_json::Value,
    ) -> Result<Arc<Mutex<Session>>, ApiError> {
        let cfg = api::merge_config(&self.config.base_loop, overrides)?;
        if self.index.set().row_of(starter_id).is_none() {
            return Err(ApiError::NotFound(format!(
                "unknown starter item {starter_id:?}"
            )));
        }
        let session = Session::create(
            &self.index,
            starter_id,
            cfg,
            self.config.state_dir.as_deref(),
        )?;
        log::info!("created session {}", session.id);
        Ok(self.insert(session))
    }

    fn insert(&self, s: Session) -> Arc<Mutex<Session>> {
        let id = s.id.clone();
        let s = Arc::new(Mutex::new(s));
        self.sessions.write().unwrap().insert(id, Arc::clone(&s));
        s
    }
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// A server on its own runtime thread, stopped on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server stopped: {e}");
                }
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
