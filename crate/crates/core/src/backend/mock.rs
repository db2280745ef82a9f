//! Loopback HTTP server exposing any set of providers on the wire format.
//! Used for transport tests and as a stand-in service.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use crate::backend::{
    EmbedRequest, EmbedResponse, Embedder, GenerationRequest, GenerationResponse, Generator,
    RewardModel, RewardRequest, RewardResponse,
};
use crate::error::BackendError;

pub trait Service: Generator + RewardModel + Embedder + 'static {}
impl<T: Generator + RewardModel + Embedder + 'static> Service for T {}

type Shared = Arc<dyn Service>;
type Reply<T> = Result<Json<T>, (StatusCode, String)>;

fn reject(e: BackendError) -> (StatusCode, String) {
    (StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
}

async fn generate(
    State(s): State<Shared>,
    Json(req): Json<GenerationRequest>,
) -> Reply<GenerationResponse> {
    s.generate(&req).map(Json).map_err(reject)
}

async fn score(State(s): State<Shared>, Json(req): Json<RewardRequest>) -> Reply<RewardResponse> {
    s.score(&req).map(Json).map_err(reject)
}

async fn embed(State(s): State<Shared>, Json(req): Json<EmbedRequest>) -> Reply<EmbedResponse> {
    s.embed(&req).map(Json).map_err(reject)
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/score", post(score))
        .route("/embed", post(embed))
        .with_state(service)
}

/// A server running on its own runtime thread; stopped on drop.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and serve `service`.
    pub fn start<S: Service>(service: S, addr: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_io()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(Arc::new(service));
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("mock server stopped: {e}");
                }
            });
        });
        Ok(MockServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops (it never does unless dropped elsewhere).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
