//! Deployment records, metrics and the append-only record log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::control::{SegmentLog, TickRecord};
use crate::error::{Error, Result};
use crate::geometry::{path_pose_at, Vec3};
use crate::needle::NeedleState;
use crate::planner::ThreeStagePlan;
use crate::registration::RigidTransform;
use crate::respiration::GateSample;

use super::config::SimConfig;

pub const RECORD_VERSION: u32 = 1;

/// `+∞` as JSON `null`, which JSON cannot otherwise represent.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Per-purpose RNG seeds of one deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub registration: u64,
    pub planning: u64,
    pub navigation: u64,
    pub aiming: u64,
    pub needle: u64,
    pub sensing: u64,
    pub breath: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let mut s = master;
        let mut next = || {
            s = splitmix(s);
            s
        };
        Self {
            master,
            registration: next(),
            planning: next(),
            navigation: next(),
            aiming: next(),
            needle: next(),
            sensing: next(),
            breath: next(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentKind {
    Robot,
    Manual,
}

impl DeploymentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeploymentKind::Robot => "robot",
            DeploymentKind::Manual => "manual",
        }
    }
}

/// One call made on an interactive deployment, in order. Consecutive
/// control ticks are coalesced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SessionAction {
    Plan,
    Select { index: usize },
    Alignment,
    Aim { yaw: f64, pitch: f64, advance: f64 },
    Start,
    Ticks { count: u64 },
    Hold,
    Abort { reason: String },
}

/// How a deployment ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    NoPlanFound { best_clearance: f64, samples: usize },
    AlignmentFailed { attempts: usize },
    SafetyStop { clearance: f64, t: f64 },
    GateTimeout { waited: f64 },
    SegmentIncomplete { remaining: f64 },
    Aborted { reason: String },
    Failed { error: String },
}

impl Outcome {
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::NoPlanFound {
                best_clearance,
                samples,
            } => Outcome::NoPlanFound {
                best_clearance: *best_clearance,
                samples: *samples,
            },
            Error::AlignmentFailed { attempts } => Outcome::AlignmentFailed { attempts: *attempts },
            Error::SafetyStop { clearance, t } => Outcome::SafetyStop {
                clearance: *clearance,
                t: *t,
            },
            Error::GateTimeout { waited } => Outcome::GateTimeout { waited: *waited },
            Error::SegmentIncomplete { remaining } => Outcome::SegmentIncomplete { remaining: *remaining },
            other => Outcome::Failed {
                error: other.to_string(),
            },
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Outcome::Completed)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::NoPlanFound { .. } => "no_plan_found",
            Outcome::AlignmentFailed { .. } => "alignment_failed",
            Outcome::SafetyStop { .. } => "safety_stop",
            Outcome::GateTimeout { .. } => "gate_timeout",
            Outcome::SegmentIncomplete { .. } => "segment_incomplete",
            Outcome::Aborted { .. } => "aborted",
            Outcome::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdverseEvent {
    pub t: f64,
    pub kind: String,
    pub position: Vec3,
    pub clearance: f64,
}

/// Sensed tip in the tracker frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedSample {
    pub t: f64,
    pub position: Vec3,
    pub inserted: f64,
    pub window_open: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPoint {
    pub t: f64,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub version: u32,
    pub kind: DeploymentKind,
    pub scene_hash: String,
    pub target: Vec3,
    /// Registered tracker → scene map used during the procedure.
    pub em_to_scene: RigidTransform,
    pub seeds: Seeds,
    pub config: SimConfig,
    pub candidate_count: usize,
    pub selected_plan: Option<usize>,
    /// Needle plan actually executed (after replanning).
    pub plan: Option<ThreeStagePlan>,
    pub aiming_attempts: usize,
    pub segments: Vec<SegmentLog>,
    pub tracked_tip: Vec<TrackedSample>,
    pub true_tip: Vec<TimedPoint>,
    pub breath_trace: Vec<GateSample>,
    pub final_state: Option<NeedleState>,
    pub adverse_events: Vec<AdverseEvent>,
    /// Smallest true clearance of the tip over the deployment (mm);
    /// infinite, stored as `null`, when the needle never entered tissue.
    #[serde(with = "unbounded")]
    pub min_true_clearance: f64,
    /// True clearance fell below the planning margin without colliding.
    pub margin_flag: bool,
    pub outcome: Outcome,
    /// Calls of an interactive session; absent for scripted deployments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<Vec<SessionAction>>,
}

impl DeploymentRecord {
    /// Target expressed in the tracker frame through the registration.
    pub fn target_em(&self) -> Vec3 {
        self.em_to_scene.inverse().apply(&self.target)
    }

    /// Arclength actually inserted into the parenchyma.
    pub fn inserted_length(&self) -> f64 {
        self.final_state.map(|s| s.inserted).unwrap_or(0.0)
    }

    pub fn ticks(&self) -> impl Iterator<Item = &TickRecord> {
        self.segments.iter().flat_map(|s| s.ticks.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Distance between the last sensed tip and the target, in the tracker frame.
pub fn targeting_error(rec: &DeploymentRecord) -> Result<f64> {
    let last = rec
        .tracked_tip
        .last()
        .ok_or_else(|| Error::Precondition("record has no tracked samples".into()))?;
    Ok((last.position - rec.target_em()).norm())
}

/// Distance between the true final tip and the target in the scene frame.
pub fn true_targeting_error(rec: &DeploymentRecord) -> Option<f64> {
    rec.final_state.map(|s| (s.tip.position - rec.target).norm())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrorSeries {
    /// `(t, mm)` for samples taken inside a safe insertion window.
    pub in_window: Vec<(f64, f64)>,
    /// Samples during tidal breathing, reported separately.
    pub out_of_window: Vec<(f64, f64)>,
}

impl TrajectoryErrorSeries {
    pub fn max_in_window(&self) -> f64 {
        self.in_window.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Pairs each tracked sample with the plan point at the same inserted
/// arclength, in the tracker frame.
pub fn trajectory_error_series(rec: &DeploymentRecord) -> TrajectoryErrorSeries {
    let mut out = TrajectoryErrorSeries::default();
    let Some(plan) = &rec.plan else {
        return out;
    };
    let to_em = rec.em_to_scene.inverse();
    let total = plan.needle_length();
    for s in &rec.tracked_tip {
        let Some(pose) = path_pose_at(&plan.needle_path, s.inserted.min(total)) else {
            continue;
        };
        let e = (to_em.apply(&pose.position) - s.position).norm();
        if s.window_open {
            out.in_window.push((s.t, e));
        } else {
            out.out_of_window.push((s.t, e));
        }
    }
    out
}

/// Headline numbers of one deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentMetrics {
    pub length_mm: f64,
    pub targeting_error: Option<f64>,
    pub true_error: Option<f64>,
    pub max_trajectory_error: f64,
    #[serde(with = "unbounded")]
    pub min_true_clearance: f64,
    pub adverse: bool,
    pub margin_flag: bool,
    pub completed: bool,
}

pub fn metrics(rec: &DeploymentRecord) -> DeploymentMetrics {
    DeploymentMetrics {
        length_mm: rec.inserted_length(),
        targeting_error: targeting_error(rec).ok(),
        true_error: true_targeting_error(rec),
        max_trajectory_error: trajectory_error_series(rec).max_in_window(),
        min_true_clearance: rec.min_true_clearance,
        adverse: !rec.adverse_events.is_empty(),
        margin_flag: rec.margin_flag,
        completed: rec.outcome.is_completed(),
    }
}

/// First line of a record log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub version: u32,
    pub kind: DeploymentKind,
    pub scene_hash: String,
    pub target: Vec3,
    pub seeds: Seeds,
}

/// Writes a record as two JSON lines: a header, then the full record.
pub fn write_record<W: Write>(mut w: W, rec: &DeploymentRecord) -> Result<()> {
    let header = RecordHeader {
        version: rec.version,
        kind: rec.kind,
        scene_hash: rec.scene_hash.clone(),
        target: rec.target,
        seeds: rec.seeds,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    writeln!(w, "{}", rec.to_json())?;
    w.flush()?;
    Ok(())
}

pub fn read_record<R: BufRead>(r: R) -> Result<DeploymentRecord> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        loop {
            match lines.next() {
                Some(l) => {
                    let l = l?;
                    if !l.trim().is_empty() {
                        return Ok(l);
                    }
                }
                None => return Err(Error::Parse("record log ended early".into())),
            }
        }
    };
    let header: RecordHeader = serde_json::from_str(&next()?)?;
    if header.version != RECORD_VERSION {
        return Err(Error::Parse(format!("unsupported record version {}", header.version)));
    }
    let rec: DeploymentRecord = serde_json::from_str(&next()?)?;
    if rec.seeds != header.seeds || rec.scene_hash != header.scene_hash {
        return Err(Error::Parse("record header does not match its body".into()));
    }
    Ok(rec)
}
