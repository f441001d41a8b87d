//! HTTP/WebSocket front end. Each session runs in its own task that owns the
//! [`Session`]; connection handlers only touch its feedback inbox, a control
//! channel and the snapshot broadcast.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde_json::json;
use tamer_core::observer::FeedbackInbox;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::{interval_at, Instant, MissedTickBehavior};
use tower_http::services::ServeDir;

use crate::protocol::{
    parse_client_message, Ack, ClientMessage, ControlAck, ControlCommand, ErrorCode, FeedbackAck, ServerMessage,
    WireError,
};
use crate::session::{Session, SessionConfig};

pub const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub session: SessionConfig,
    /// Directory with the UI bundle, served for every unmatched path.
    pub static_dir: Option<PathBuf>,
    /// Allow any session id; otherwise only `default_session` exists.
    pub multi_session: bool,
    pub default_session: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            session: SessionConfig::default(),
            static_dir: None,
            multi_session: false,
            default_session: DEFAULT_SESSION.to_string(),
        }
    }
}

type ControlRequest = (ControlCommand, oneshot::Sender<Result<ControlAck, WireError>>);

#[derive(Clone)]
pub struct SessionHandle {
    pub id: String,
    inbox: FeedbackInbox,
    snapshots: broadcast::Sender<String>,
    control: mpsc::Sender<ControlRequest>,
    clients: Arc<AtomicUsize>,
}

impl SessionHandle {
    /// Starts the session's agent loop on the current runtime.
    pub fn spawn(session: Session) -> Self {
        let (snapshots, _) = broadcast::channel(256);
        let (control, control_rx) = mpsc::channel(32);
        let handle = SessionHandle {
            id: session.id().to_string(),
            inbox: session.inbox(),
            snapshots: snapshots.clone(),
            control,
            clients: Arc::new(AtomicUsize::new(0)),
        };
        tokio::spawn(session_loop(session, control_rx, snapshots));
        handle
    }

    pub fn clients(&self) -> usize {
        self.clients.load(Ordering::SeqCst)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.snapshots.subscribe()
    }

    pub async fn control(&self, cmd: ControlCommand) -> Result<ControlAck, WireError> {
        let (tx, rx) = oneshot::channel();
        let gone = || WireError::new(ErrorCode::SessionUnavailable, "session loop has stopped");
        self.control.send((cmd, tx)).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    /// Handles one text frame and returns the reply for the sender.
    pub async fn handle_text(&self, text: &str) -> ServerMessage {
        let reply = match parse_client_message(text) {
            Ok(ClientMessage::Feedback(f)) => f.polarity().map(|p| {
                let ticket = self.inbox.submit(p);
                Ack::Feedback(FeedbackAck {
                    ticket: ticket.id,
                    polarity: p.as_i8(),
                    episode: ticket.credit.episode,
                    step: ticket.credit.step,
                })
            }),
            Ok(ClientMessage::Control(cmd)) => self.control(cmd).await.map(Ack::Control),
            Err(e) => Err(e),
        };
        match reply {
            Ok(ack) => ServerMessage::Ack(ack),
            Err(e) => ServerMessage::Error(e),
        }
    }
}

/// The only place the session is mutated. Ticks and control commands are
/// serialized through this task, so ticks never overlap.
async fn session_loop(mut session: Session, mut control: mpsc::Receiver<ControlRequest>, out: broadcast::Sender<String>) {
    loop {
        let period = Duration::from_millis(session.tick_ms());
        let mut ticker = interval_at(Instant::now() + period, period);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => match session.tick() {
                    Ok(Some(snapshot)) => {
                        // No subscribers is not an error; the snapshot is simply unseen.
                        let _ = out.send(ServerMessage::Snapshot(snapshot).to_json());
                    }
                    Ok(None) => {}
                    Err(e) => tracing::error!(session = session.id(), "tick failed: {e}"),
                },
                req = control.recv() => {
                    let Some((cmd, reply)) = req else { return };
                    let before = session.tick_ms();
                    let _ = reply.send(session.control(cmd));
                    if session.tick_ms() != before {
                        break;
                    }
                }
            }
        }
    }
}

struct Inner {
    cfg: ServerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(cfg: ServerConfig) -> Self {
        AppState(Arc::new(Inner {
            cfg,
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    /// Returns the running session `id`, starting it if needed. Must be
    /// called from within a tokio runtime.
    pub fn session(&self, id: &str) -> Result<SessionHandle, WireError> {
        let cfg = &self.0.cfg;
        if !cfg.multi_session && id != cfg.default_session {
            return Err(WireError::new(
                ErrorCode::SessionUnavailable,
                format!("unknown session '{id}'; this server runs only '{}'", cfg.default_session),
            ));
        }
        let mut sessions = self.0.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(h) = sessions.get(id) {
            return Ok(h.clone());
        }
        let session = Session::new(id, cfg.session.clone())
            .map_err(|e| WireError::new(ErrorCode::SessionUnavailable, e.to_string()))?;
        let handle = SessionHandle::spawn(session);
        sessions.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    fn session_summaries(&self) -> Vec<serde_json::Value> {
        let sessions = self.0.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let mut list: Vec<_> = sessions
            .values()
            .map(|h| json!({"id": h.id, "clients": h.clients()}))
            .collect();
        list.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
        list
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.0.cfg.static_dir.clone();
    let router = Router::new()
        .route("/healthz", get(healthz))
        .route("/session/{id}", get(connect))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

pub async fn serve(listener: TcpListener, cfg: ServerConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "sessions": state.session_summaries()}))
}

async fn connect(Path(id): Path<String>, State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    match state.session(&id) {
        Ok(handle) => ws.on_upgrade(move |socket| client(socket, handle)),
        Err(e) => (StatusCode::NOT_FOUND, Json(ServerMessage::Error(e))).into_response(),
    }
}

async fn client(socket: WebSocket, handle: SessionHandle) {
    handle.clients.fetch_add(1, Ordering::SeqCst);
    let (mut sink, mut stream) = socket.split();
    let (replies, mut reply_rx) = mpsc::channel::<String>(64);
    let mut snapshots = handle.subscribe();

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                biased;
                reply = reply_rx.recv() => match reply {
                    Some(t) => t,
                    None => break,
                },
                snap = snapshots.recv() => match snap {
                    Ok(t) => t,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!("client lagged; skipped {n} snapshots");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                let reply = handle.handle_text(text.as_str()).await;
                if replies.send(reply.to_json()).await.is_err() {
                    break;
                }
            }
            Message::Binary(_) => {
                let err = WireError::new(ErrorCode::MalformedMessage, "binary frames are not supported");
                if replies.send(ServerMessage::Error(err).to_json()).await.is_err() {
                    break;
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    drop(replies);
    writer.abort();
    handle.clients.fetch_sub(1, Ordering::SeqCst);
}
