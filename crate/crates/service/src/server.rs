//! Streaming service: newline-delimited JSON over any byte stream.
//!
//! Each connection hosts any number of sessions. A live session is opened by
//! its first frame and gets its own worker and model handles; frames that
//! arrive while the worker is busy replace each other (latest frame wins)
//! and the next result reports how many were skipped. Playback sessions run
//! a recorded sweep through the cascade without dropping frames.

use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use echoguide_core::ingest::sweep::parse_sweep_manifest;
use echoguide_core::protocol::{
    decode_frame_payload, parse_client_message, ClientMessage, ErrorCode, ResultMessage, ServerMessage,
    SessionSource,
};
use echoguide_core::Frame;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::error::{Error, Result};
use crate::models::CascadeModels;
use crate::session::Session;

/// Builds a fresh set of model handles for each session.
pub type ModelFactory = Arc<dyn Fn() -> Result<CascadeModels> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Frame rate assumed for live sessions.
    pub live_fps: f64,
    /// Append every result to `<log_dir>/<session_id>.jsonl` when set.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            live_fps: 30.0,
            log_dir: None,
        }
    }
}

pub async fn serve(listener: TcpListener, factory: ModelFactory, config: ServerConfig) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        tracing::info!(%peer, "connection opened");
        let (factory, config) = (factory.clone(), config.clone());
        tokio::spawn(async move {
            if let Err(e) = handle_connection(stream, factory, config).await {
                tracing::warn!(%peer, error = %e, "connection failed");
            }
        });
    }
}

/// Serve one connection until the client closes it or sends a bare
/// `close`. Pending work finishes before the stream is shut down.
pub async fn handle_connection<S>(stream: S, factory: ModelFactory, config: ServerConfig) -> std::io::Result<()>
where
    S: AsyncRead + AsyncWrite + Send + 'static,
{
    let (read, write) = tokio::io::split(stream);
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_messages(write, rx, config.log_dir.clone()));
    let mut conn = Connection {
        factory,
        config,
        tx,
        live: HashMap::new(),
        closed: HashSet::new(),
        tasks: Vec::new(),
        playbacks: 0,
    };
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        match parse_client_message(&line) {
            Ok(ClientMessage::Close { session_id: None }) => break,
            Ok(msg) => conn.handle(msg).await,
            Err(e) => conn.send(e.into_message()),
        }
    }
    conn.shutdown().await;
    // Dropping the last sender lets the writer drain and finish.
    drop(conn);
    writer.await.map_err(std::io::Error::other)?
}

async fn write_messages<W: AsyncWrite + Unpin>(
    mut out: W,
    mut rx: mpsc::UnboundedReceiver<ServerMessage>,
    log_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    while let Some(msg) = rx.recv().await {
        let line = msg.to_line();
        if let (Some(dir), ServerMessage::Result(r)) = (&log_dir, &msg) {
            if let Err(e) = append_log(dir, &r.session_id, &line) {
                tracing::warn!(error = %e, "session log write failed");
            }
        }
        out.write_all(line.as_bytes()).await?;
        out.flush().await?;
    }
    out.shutdown().await
}

fn append_log(dir: &Path, session_id: &str, line: &str) -> std::io::Result<()> {
    let name: String = session_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    std::fs::create_dir_all(dir)?;
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{name}.jsonl")))?;
    f.write_all(line.as_bytes())
}

fn error_message(e: &Error) -> ServerMessage {
    ServerMessage::error(e.code(), e.to_string())
}

#[derive(Default)]
struct SlotState {
    pending: Option<(u64, Frame)>,
    dropped: usize,
    closing: bool,
}

/// Single-frame mailbox between the connection reader and a live worker.
#[derive(Default)]
struct Slot {
    state: Mutex<SlotState>,
    notify: Notify,
}

struct LiveSession {
    slot: Arc<Slot>,
    last_index: Option<u64>,
    worker: JoinHandle<()>,
}

struct Connection {
    factory: ModelFactory,
    config: ServerConfig,
    tx: mpsc::UnboundedSender<ServerMessage>,
    live: HashMap<String, LiveSession>,
    closed: HashSet<String>,
    tasks: Vec<JoinHandle<()>>,
    playbacks: usize,
}

impl Connection {
    fn send(&self, msg: ServerMessage) {
        // The writer only stops when the peer is gone.
        let _ = self.tx.send(msg);
    }

    async fn handle(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::Frame {
                session_id,
                frame_index,
                image_b64,
                ..
            } => self.frame(session_id, frame_index, &image_b64).await,
            ClientMessage::OpenPlayback { sweep_path } => self.open_playback(PathBuf::from(sweep_path)),
            ClientMessage::Close { session_id: Some(id) } => self.close(id),
            ClientMessage::Close { session_id: None } => unreachable!("handled by the reader"),
        }
    }

    async fn frame(&mut self, session_id: String, frame_index: u64, image_b64: &str) {
        if self.closed.contains(&session_id) {
            self.send(ServerMessage::error(
                ErrorCode::SessionNotFound,
                format!("session {session_id} is closed"),
            ));
            return;
        }
        let frame = match decode_frame_payload(image_b64) {
            Ok(f) => f,
            Err(e) => return self.send(e.into_message()),
        };
        if !self.live.contains_key(&session_id) {
            match self.open_live(&session_id).await {
                Ok(s) => {
                    self.live.insert(session_id.clone(), s);
                }
                Err(e) => return self.send(error_message(&e)),
            }
        }
        let session = self.live.get_mut(&session_id).expect("opened above");
        if let Some(last) = session.last_index {
            if frame_index <= last {
                self.send(ServerMessage::error(
                    ErrorCode::OutOfOrder,
                    format!("frame_index {frame_index} does not follow {last}"),
                ));
                return;
            }
        }
        session.last_index = Some(frame_index);
        let mut state = session.slot.state.lock().expect("slot lock");
        if state.pending.replace((frame_index, frame)).is_some() {
            state.dropped += 1;
        }
        drop(state);
        session.slot.notify.notify_one();
    }

    async fn open_live(&self, id: &str) -> Result<LiveSession> {
        let factory = self.factory.clone();
        let (fps, sid) = (self.config.live_fps, id.to_string());
        let session = tokio::task::spawn_blocking(move || Session::new(sid, factory()?, fps))
            .await
            .map_err(|e| Error::Session(e.to_string()))??;
        self.send(ServerMessage::Session {
            session_id: id.to_string(),
            source: SessionSource::Live,
        });
        let slot = Arc::new(Slot::default());
        let worker = tokio::spawn(live_worker(session, slot.clone(), self.tx.clone()));
        Ok(LiveSession {
            slot,
            last_index: None,
            worker,
        })
    }

    fn close(&mut self, id: String) {
        match self.live.remove(&id) {
            Some(s) => {
                s.slot.state.lock().expect("slot lock").closing = true;
                s.slot.notify.notify_one();
                self.tasks.push(s.worker);
                self.closed.insert(id);
            }
            None => self.send(ServerMessage::error(
                ErrorCode::SessionNotFound,
                format!("no open session {id}"),
            )),
        }
    }

    fn open_playback(&mut self, path: PathBuf) {
        let n = self.playbacks;
        self.playbacks += 1;
        let (factory, tx) = (self.factory.clone(), self.tx.clone());
        self.tasks.push(tokio::task::spawn_blocking(move || run_playback(&path, n, &factory, &tx)));
    }

    async fn shutdown(&mut self) {
        for (_, s) in self.live.drain() {
            s.slot.state.lock().expect("slot lock").closing = true;
            s.slot.notify.notify_one();
            self.tasks.push(s.worker);
        }
        for t in self.tasks.drain(..) {
            if let Err(e) = t.await {
                tracing::error!(error = %e, "session task panicked");
            }
        }
    }
}

async fn live_worker(mut session: Session, slot: Arc<Slot>, tx: mpsc::UnboundedSender<ServerMessage>) {
    loop {
        let next = {
            let mut state = slot.state.lock().expect("slot lock");
            match state.pending.take() {
                Some(p) => Some((p, std::mem::take(&mut state.dropped))),
                None if state.closing => return,
                None => None,
            }
        };
        let Some(((index, frame), dropped)) = next else {
            slot.notify.notified().await;
            continue;
        };
        let joined = tokio::task::spawn_blocking(move || {
            let r = session.process_frame(index as usize, &frame);
            (session, r)
        })
        .await;
        let (s, result) = match joined {
            Ok(v) => v,
            Err(e) => {
                let _ = tx.send(ServerMessage::error(ErrorCode::Internal, e.to_string()));
                return;
            }
        };
        session = s;
        let msg = match result {
            Ok(mut r) => {
                r.dropped_count = dropped;
                ServerMessage::Result(ResultMessage::from_result(session.id(), &r))
            }
            Err(e) => error_message(&e),
        };
        let _ = tx.send(msg);
    }
}

/// Replay every sweep of a manifest, one session per sweep. Results carry
/// the recorded label as `truth`.
fn run_playback(path: &Path, n: usize, factory: &ModelFactory, tx: &mpsc::UnboundedSender<ServerMessage>) {
    let fail = |detail: String| {
        let _ = tx.send(ServerMessage::error(ErrorCode::PlaybackFailed, detail));
    };
    let recordings = match parse_sweep_manifest(path) {
        Ok(r) => r,
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    for rec in recordings {
        let id = format!("playback-{n}:{}", rec.sweep_id);
        let mut session = match factory().and_then(|m| Session::new(id.clone(), m, rec.fps)) {
            Ok(s) => s,
            Err(e) => return fail(e.to_string()),
        };
        let _ = tx.send(ServerMessage::Session {
            session_id: id.clone(),
            source: SessionSource::Playback,
        });
        let mut frames = 0;
        for (i, frame) in rec.frames.iter().enumerate() {
            match session.process_frame(i, frame) {
                Ok(r) => {
                    let mut msg = ResultMessage::from_result(&id, &r);
                    msg.truth = Some(rec.frame_categories[i]);
                    let _ = tx.send(ServerMessage::Result(msg));
                    frames += 1;
                }
                Err(e) => {
                    let _ = tx.send(error_message(&e));
                    break;
                }
            }
        }
        let _ = tx.send(ServerMessage::End {
            session_id: id,
            frames,
        });
    }
}
