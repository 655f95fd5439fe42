//! Live mode: one control thread owns the [`Engine`]; WebSocket
//! connections only enqueue commands and subscribe to the broadcast of
//! outgoing bodies. Assessments run on the rayon pool against snapshots.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use parley_core::decision::Event;
use parley_core::intent::IntentKind;
use parley_core::world::Config;
use tokio::sync::{broadcast, oneshot};

use crate::engine::{AssessMode, Engine, Outgoing};
use crate::protocol::{decode_client, ClientBody, SceneView, Sequencer, ServerBody, TelemetryFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// One tick per `dt` of wall-clock time.
    WallClock,
    /// Ticks as fast as the loop allows.
    Unpaced,
}

enum Command {
    Utterance(String),
    Intent(IntentKind, Option<u64>),
    Snapshot(oneshot::Sender<(f64, SceneView, TelemetryFrame)>),
    Assessed(Event),
}

#[derive(Clone)]
struct Shared {
    commands: mpsc::Sender<Command>,
    frames: broadcast::Sender<Arc<Outgoing>>,
}

pub struct Server {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    control: Option<JoinHandle<()>>,
    http: tokio::task::JoinHandle<()>,
}

impl Server {
    /// Stops the control loop and the listener.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.http.abort();
        if let Some(h) = self.control.take() {
            let _ = h.join();
        }
    }

    /// Runs until the listener task ends.
    pub async fn wait(mut self) {
        let _ = (&mut self.http).await;
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Binds `listen`, starts the control loop and serves `/ws`.
pub async fn start(config: &Config, listen: SocketAddr, pacing: Pacing) -> std::io::Result<Server> {
    let engine = Engine::new(config, AssessMode::Deferred).map_err(|e| std::io::Error::other(e.to_string()))?;
    let (commands, inbox) = mpsc::channel();
    let (frames, _) = broadcast::channel(4096);
    let stop = Arc::new(AtomicBool::new(false));

    let control = {
        let frames = frames.clone();
        let commands = commands.clone();
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("control".into())
            .spawn(move || control_loop(engine, inbox, commands, frames, stop, pacing))?
    };

    let shared = Shared { commands, frames };
    let app = Router::new().route("/ws", get(upgrade)).with_state(shared);
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let http = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(Server { addr, stop, control: Some(control), http })
}

fn control_loop(
    mut engine: Engine,
    inbox: mpsc::Receiver<Command>,
    commands: mpsc::Sender<Command>,
    frames: broadcast::Sender<Arc<Outgoing>>,
    stop: Arc<AtomicBool>,
    pacing: Pacing,
) {
    let dt = Duration::from_secs_f64(engine.params().dt);
    let mut next = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        while let Ok(cmd) = inbox.try_recv() {
            match cmd {
                Command::Utterance(text) => engine.submit_utterance(&text),
                Command::Intent(kind, id) => engine.submit_intent(kind, id),
                Command::Snapshot(reply) => {
                    let _ = reply.send((engine.t(), engine.scene_view(), engine.telemetry()));
                }
                Command::Assessed(event) => engine.deliver(event),
            }
        }
        engine.step();
        for job in engine.take_pending() {
            let back = commands.clone();
            rayon::spawn(move || {
                let _ = back.send(Command::Assessed(job.run()));
            });
        }
        for out in engine.drain_outbox() {
            // no subscribers is fine
            let _ = frames.send(Arc::new(out));
        }
        match pacing {
            Pacing::WallClock => {
                next += dt;
                let now = Instant::now();
                if next > now {
                    std::thread::sleep(next - now);
                } else {
                    next = now;
                }
            }
            Pacing::Unpaced => std::thread::yield_now(),
        }
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

async fn connection(socket: WebSocket, shared: Shared) {
    let mut feed = shared.frames.subscribe();
    let (mut tx, mut rx) = socket.split();
    let mut seq = Sequencer::default();
    let mut last_t = 0.0;

    loop {
        tokio::select! {
            frame = feed.recv() => {
                let out = match frame {
                    Ok(out) => out,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                last_t = out.t;
                let text = serde_json::to_string(&seq.wrap(out.t, &out.body)).expect("server frames serialize");
                if tx.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = rx.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(Message::Binary(_))) => {
                        let body = ServerBody::Error { message: "binary frames are not supported".into() };
                        let _ = tx.send(Message::Text(serde_json::to_string(&seq.wrap(last_t, body)).expect("serializes").into())).await;
                        break;
                    }
                    Some(Ok(_)) => continue,
                };
                let body = match decode_client(&text) {
                    Ok(m) => m.body,
                    Err(e) => {
                        let body = ServerBody::Error { message: format!("malformed frame: {e}") };
                        let _ = tx.send(Message::Text(serde_json::to_string(&seq.wrap(last_t, body)).expect("serializes").into())).await;
                        let _ = tx.send(Message::Close(None)).await;
                        break;
                    }
                };
                match body {
                    ClientBody::Utterance { text } => {
                        let _ = shared.commands.send(Command::Utterance(text));
                    }
                    ClientBody::Intent { intent, proposal_id } => {
                        let _ = shared.commands.send(Command::Intent(intent, proposal_id));
                    }
                    ClientBody::SnapshotRequest => {
                        let (reply, answer) = oneshot::channel();
                        if shared.commands.send(Command::Snapshot(reply)).is_err() {
                            break;
                        }
                        let Ok((t, scene, telemetry)) = answer.await else { break };
                        for body in [ServerBody::SceneUpdate(scene), ServerBody::Telemetry(telemetry)] {
                            let text = serde_json::to_string(&seq.wrap(t, body)).expect("serializes");
                            if tx.send(Message::Text(text.into())).await.is_err() {
                                return;
                            }
                        }
                    }
                }
            }
        }
    }
}
