//! TCP session server. Each session is owned by one task that handles its
//! requests in order; while steering, a separate clock task feeds it ticks
//! through a bounded channel at the configured real-time factor.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::{interval, sleep_until, Instant, MissedTickBehavior};

use crate::protocol::{Envelope, ErrorCode, Event};
use crate::session::{request_id, Session};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    /// Simulated seconds per wall-clock second.
    pub rtf: f64,
    /// How long a session without a connected client is kept.
    pub session_ttl: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            rtf: 1.0,
            session_ttl: Duration::from_secs(600),
        }
    }
}

const CLOCK_BUFFER: usize = 4;
const INPUT_BUFFER: usize = 64;
const OUTPUT_BUFFER: usize = 1024;

type Registry = Arc<Mutex<HashMap<String, mpsc::Sender<Input>>>>;

enum Input {
    Line(String),
    Attach {
        conn: u64,
        out: mpsc::Sender<String>,
        resumed: bool,
        id: Option<Value>,
    },
    Detach {
        conn: u64,
    },
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, config: ServerConfig) -> std::io::Result<()> {
    if !(config.rtf.is_finite() && config.rtf > 0.0) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "real-time factor must be positive",
        ));
    }
    let registry: Registry = Arc::default();
    let next_conn = Arc::new(AtomicU64::new(0));
    loop {
        let (stream, _) = listener.accept().await?;
        let conn = next_conn.fetch_add(1, Ordering::Relaxed);
        tokio::spawn(connection(stream, conn, registry.clone(), config));
    }
}

async fn connection(stream: TcpStream, conn: u64, registry: Registry, config: ServerConfig) {
    let (read, mut write) = stream.into_split();
    let (out, mut out_rx) = mpsc::channel::<String>(OUTPUT_BUFFER);
    let writer = tokio::spawn(async move {
        while let Some(mut line) = out_rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    let mut attached: Option<mpsc::Sender<Input>> = None;
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(session_id) = resume_target(&line) {
            let found = registry.lock().expect("registry lock").get(&session_id).cloned();
            if let Some(previous) = attached.take() {
                let _ = previous.send(Input::Detach { conn }).await;
            }
            if let Some(session) = found {
                let attach = Input::Attach {
                    conn,
                    out: out.clone(),
                    resumed: true,
                    id: request_id(&line),
                };
                // an owner that expired after the lookup drops the attach
                if session.send(attach).await.is_ok() {
                    attached = Some(session);
                    continue;
                }
            }
            let reply = Envelope::reply(
                request_id(&line),
                Event::error(ErrorCode::UnknownSession, format!("no session {session_id}"), None),
            );
            if out.send(reply.to_line()).await.is_err() {
                break;
            }
            continue;
        }
        let session = match &attached {
            Some(s) => s.clone(),
            None => {
                let s = open_session(&registry, config);
                let attach = Input::Attach {
                    conn,
                    out: out.clone(),
                    resumed: false,
                    id: None,
                };
                if s.send(attach).await.is_err() {
                    break;
                }
                attached = Some(s.clone());
                s
            }
        };
        if session.send(Input::Line(line)).await.is_err() {
            // the session expired underneath this connection
            attached = None;
        }
    }
    if let Some(session) = attached {
        let _ = session.send(Input::Detach { conn }).await;
    }
    drop(out);
    let _ = writer.await;
}

/// Session id of a `resume` request, if the line is one.
fn resume_target(line: &str) -> Option<String> {
    let value: Value = serde_json::from_str(line).ok()?;
    if value.get("type")?.as_str()? != "resume" {
        return None;
    }
    Some(value.get("session_id")?.as_str()?.to_string())
}

fn open_session(registry: &Registry, config: ServerConfig) -> mpsc::Sender<Input> {
    let id = uuid::Uuid::new_v4().to_string();
    let (tx, rx) = mpsc::channel(INPUT_BUFFER);
    registry.lock().expect("registry lock").insert(id.clone(), tx.clone());
    tokio::spawn(own(Session::new(id), rx, registry.clone(), config));
    tx
}

struct Clock {
    task: JoinHandle<()>,
    ticks: mpsc::Receiver<()>,
}

impl Clock {
    fn start(sim_period: f64, rtf: f64) -> Self {
        let (tx, ticks) = mpsc::channel(CLOCK_BUFFER);
        let period = Duration::from_secs_f64(sim_period / rtf);
        let task = tokio::spawn(async move {
            let mut iv = interval(period);
            iv.set_missed_tick_behavior(MissedTickBehavior::Delay);
            loop {
                iv.tick().await;
                if tx.send(()).await.is_err() {
                    break;
                }
            }
        });
        Self { task, ticks }
    }
}

impl Drop for Clock {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Owner task of one session.
async fn own(mut session: Session, mut inputs: mpsc::Receiver<Input>, registry: Registry, config: ServerConfig) {
    let mut client: Option<(u64, mpsc::Sender<String>)> = None;
    let mut clock: Option<Clock> = None;
    let mut expires = Instant::now() + config.session_ttl;
    loop {
        if session.is_steering() && clock.is_none() {
            let period = session.tick_period().expect("steering session has a config");
            clock = Some(Clock::start(period, config.rtf));
        } else if !session.is_steering() {
            clock = None;
        }
        let outgoing: Vec<Envelope<Event>> = tokio::select! {
            input = inputs.recv() => match input {
                None => break,
                Some(Input::Line(line)) => session.handle_line(&line),
                Some(Input::Attach { conn, out, resumed, id }) => {
                    client = Some((conn, out));
                    let mut events = vec![Envelope::reply(id.clone(), Event::Session {
                        session_id: session.id().to_string(),
                        resumed,
                    })];
                    if resumed {
                        events.push(Envelope::reply(id, Event::Snapshot(Box::new(session.snapshot()))));
                    }
                    events
                }
                Some(Input::Detach { conn }) => {
                    if client.as_ref().is_some_and(|(c, _)| *c == conn) {
                        client = None;
                        expires = Instant::now() + config.session_ttl;
                    }
                    Vec::new()
                }
            },
            Some(()) = next_tick(&mut clock) => {
                session.clock_tick().into_iter().map(Envelope::new).collect()
            }
            _ = sleep_until(expires), if client.is_none() => break,
        };
        if let Some((_, out)) = &client {
            for e in outgoing {
                if out.send(e.to_line()).await.is_err() {
                    client = None;
                    expires = Instant::now() + config.session_ttl;
                    break;
                }
            }
        }
    }
    registry.lock().expect("registry lock").remove(session.id());
}

async fn next_tick(clock: &mut Option<Clock>) -> Option<()> {
    match clock {
        Some(c) => c.ticks.recv().await,
        None => std::future::pending().await,
    }
}
