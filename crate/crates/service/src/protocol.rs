//! Wire format: one JSON object per line, each carrying the schema version
//! `v` and a `type` tag. Replies echo the request's optional `id`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use bronchosteer::control::Mode;
use bronchosteer::engine::{DeploymentMetrics, DeploymentRecord, Outcome, SimConfig};
use bronchosteer::geometry::Vec3;
use bronchosteer::planner::ThreeStagePlan;
use bronchosteer::respiration::{GateState, Phase};

pub const PROTOCOL_VERSION: u32 = 1;

/// Where a session's scene comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    Generate { seed: u64 },
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    LoadScene {
        scene: SceneSource,
        /// Master seed of the deployment's random streams.
        seed: u64,
        #[serde(default)]
        target: Option<Vec3>,
        /// Seed for drawing a target when none is given; defaults to
        /// `1000 + seed`.
        #[serde(default)]
        target_seed: Option<u64>,
        #[serde(default)]
        profile: Option<String>,
        #[serde(default)]
        overrides: Vec<String>,
        /// Stream every n-th control tick (window changes always stream).
        #[serde(default)]
        stream_every: Option<u32>,
    },
    RequestPlans,
    SelectPlan {
        index: usize,
    },
    Aim {
        yaw: f64,
        pitch: f64,
        #[serde(default)]
        advance: f64,
    },
    QueryAlignment,
    StartAutonomous,
    RequestHold,
    Abort {
        #[serde(default)]
        reason: Option<String>,
    },
    GetRecord,
    GetSnapshot,
    /// Re-attach this connection to an existing session.
    Resume {
        session_id: String,
    },
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::LoadScene { .. } => "load_scene",
            Request::RequestPlans => "request_plans",
            Request::SelectPlan { .. } => "select_plan",
            Request::Aim { .. } => "aim",
            Request::QueryAlignment => "query_alignment",
            Request::StartAutonomous => "start_autonomous",
            Request::RequestHold => "request_hold",
            Request::Abort { .. } => "abort",
            Request::GetRecord => "get_record",
            Request::GetSnapshot => "get_snapshot",
            Request::Resume { .. } => "resume",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStage {
    Idle,
    Planned,
    Navigating,
    Aiming,
    Aligned,
    Steering,
    Done,
    Aborted,
}

impl SessionStage {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStage::Done | SessionStage::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// The request is not allowed in the current stage.
    OutOfOrder,
    /// Not JSON, unknown type or missing fields.
    Malformed,
    UnsupportedVersion,
    UnknownSession,
    /// The simulator rejected the request.
    Domain,
}

/// One streamed control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickEvent {
    pub t: f64,
    pub mode: Mode,
    pub insert_v: f64,
    pub spin: f64,
    /// Measured tip in the tracker frame.
    pub measured: Vec3,
    pub window_open: bool,
    pub phase: Phase,
    pub hold_elapsed: f64,
    pub traj_err: f64,
    pub inserted: f64,
    pub segment: usize,
    pub segments: usize,
}

/// Session state sent on request and after a resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub stage: SessionStage,
    pub scene_hash: Option<String>,
    pub target: Option<Vec3>,
    pub candidates: usize,
    pub selected: Option<usize>,
    pub aim_attempts: usize,
    pub t: f64,
    pub gate: Option<GateState>,
    pub last_tick: Option<TickEvent>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Session {
        session_id: String,
        resumed: bool,
    },
    SceneLoaded {
        scene_hash: String,
        target: Vec3,
        seed: u64,
        config: Box<SimConfig>,
    },
    Stage {
        stage: SessionStage,
        previous: SessionStage,
    },
    Plans {
        candidates: Vec<ThreeStagePlan>,
    },
    PlanSelected {
        index: usize,
        plan: ThreeStagePlan,
    },
    Aimed {
        attempts: usize,
    },
    Alignment {
        aligned: bool,
        deviation: f64,
        feasible: bool,
        correction: (f64, f64),
    },
    Autonomous {
        plan: ThreeStagePlan,
        segments: usize,
    },
    HoldRequested {
        t: f64,
    },
    Tick(TickEvent),
    Segment {
        index: usize,
        completed: bool,
        remaining: f64,
    },
    Done {
        outcome: Outcome,
        metrics: DeploymentMetrics,
    },
    Record {
        record: Box<DeploymentRecord>,
    },
    Snapshot(Box<Snapshot>),
    Error {
        code: ErrorCode,
        message: String,
        stage: Option<SessionStage>,
    },
}

impl Event {
    pub fn error(code: ErrorCode, message: impl Into<String>, stage: Option<SessionStage>) -> Self {
        Event::Error {
            code,
            message: message.into(),
            stage,
        }
    }
}

/// A message as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id: None,
            body,
        }
    }

    pub fn reply(id: Option<Value>, body: T) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            body,
        }
    }
}

impl<T: Serialize> Envelope<T> {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

/// A request line that could not be accepted, with the error reply to send.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected(pub Box<Envelope<Event>>);

/// Parses one request line, checking the version before the body so that
/// future message types are reported as a version mismatch.
pub fn parse_request(line: &str) -> Result<Envelope<Request>, Rejected> {
    let value: Value = serde_json::from_str(line).map_err(|e| {
        let reply = Envelope::new(Event::error(ErrorCode::Malformed, format!("invalid JSON: {e}"), None));
        Rejected(Box::new(reply))
    })?;
    let id = value.get("id").cloned();
    let fail =
        |code, message: String| Rejected(Box::new(Envelope::reply(id.clone(), Event::error(code, message, None))));
    match value.get("v").and_then(Value::as_u64) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => {
            return Err(fail(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} is not supported (expected {PROTOCOL_VERSION})"),
            ))
        }
        None => return Err(fail(ErrorCode::Malformed, "missing protocol version field `v`".into())),
    }
    serde_json::from_value(value).map_err(|e| fail(ErrorCode::Malformed, e.to_string()))
}
