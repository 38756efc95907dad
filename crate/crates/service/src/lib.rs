//! Session service for live simulated procedures.
//!
//! Clients exchange newline-delimited JSON messages (see [`protocol`]) with
//! either a socket server, where each session runs on its own task with a
//! wall-clock driven simulation clock, or the one-shot mode in
//! [`session::run_oneshot`], which processes a request stream
//! deterministically.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{
    Envelope, ErrorCode, Event, Request, SceneSource, SessionStage, Snapshot, TickEvent, PROTOCOL_VERSION,
};
pub use server::{serve, ServerConfig};
pub use session::{run_oneshot, Session};
