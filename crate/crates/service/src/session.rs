//! Session state machine over one interactive deployment.

use std::path::Path;

use serde_json::Value;

use bronchosteer::anatomy::{generate_scene, Scene, SceneParams};
use bronchosteer::control::TickRecord;
use bronchosteer::engine::{metrics, Deployment, Outcome, Seeds, SimConfig, Stage, TickOutcome};
use bronchosteer::Error;

use crate::protocol::{
    parse_request, Envelope, ErrorCode, Event, Rejected, Request, SceneSource, SessionStage, Snapshot, TickEvent,
};

const DEFAULT_PROFILE: &str = "in_vivo";
const TARGET_SEED_OFFSET: u64 = 1000;

pub struct Session {
    id: String,
    stage: SessionStage,
    deployment: Option<Deployment>,
    stream_every: u32,
    ticks: u64,
    last_tick: Option<TickEvent>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            stage: SessionStage::Idle,
            deployment: None,
            stream_every: 1,
            ticks: 0,
            last_tick: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn stage(&self) -> SessionStage {
        self.stage
    }

    pub fn is_steering(&self) -> bool {
        self.stage == SessionStage::Steering
    }

    /// Simulated seconds per control tick, once a scene is loaded.
    pub fn tick_period(&self) -> Option<f64> {
        self.deployment.as_ref().map(|d| d.config().control.tick)
    }

    pub fn snapshot(&self) -> Snapshot {
        let d = self.deployment.as_ref();
        Snapshot {
            session_id: self.id.clone(),
            stage: self.stage,
            scene_hash: d.map(|d| d.scene().hash()),
            target: d.map(|d| d.target()),
            candidates: d.map_or(0, |d| d.candidates().len()),
            selected: d.and_then(|d| d.record().selected_plan),
            aim_attempts: d.map_or(0, |d| d.aim_attempts()),
            t: d.map_or(0.0, |d| d.time()),
            gate: d.filter(|d| d.executed_plan().is_some()).map(|d| *d.gate()),
            last_tick: self.last_tick.clone(),
            outcome: d.and_then(|d| d.outcome().cloned()),
        }
    }

    /// Handles one raw request line; every returned message carries the
    /// request's `id`.
    pub fn handle_line(&mut self, line: &str) -> Vec<Envelope<Event>> {
        match parse_request(line) {
            Ok(req) => {
                let id = req.id;
                self.handle(req.body)
                    .into_iter()
                    .map(|e| Envelope::reply(id.clone(), e))
                    .collect()
            }
            Err(Rejected(reply)) => vec![*reply],
        }
    }

    pub fn handle(&mut self, req: Request) -> Vec<Event> {
        use SessionStage::*;
        let allowed = match &req {
            Request::LoadScene { .. } => self.stage == Idle,
            Request::RequestPlans => self.stage == Idle && self.deployment.is_some(),
            Request::SelectPlan { .. } => self.stage == Planned,
            Request::Aim { .. } | Request::QueryAlignment => matches!(self.stage, Aiming | Aligned),
            Request::StartAutonomous => self.stage == Aligned,
            Request::RequestHold => self.stage == Steering,
            Request::Abort { .. } => !self.stage.is_terminal(),
            Request::GetRecord => self.deployment.is_some(),
            Request::GetSnapshot => true,
            Request::Resume { .. } => {
                return vec![Event::error(
                    ErrorCode::UnknownSession,
                    "resume is only available on a session server",
                    Some(self.stage),
                )]
            }
        };
        if !allowed {
            return vec![self.out_of_order(&req)];
        }
        match req {
            Request::LoadScene {
                scene,
                seed,
                target,
                target_seed,
                profile,
                overrides,
                stream_every,
            } => self.load(scene, seed, target, target_seed, profile, overrides, stream_every),
            Request::RequestPlans => {
                let d = self.deployment.as_mut().expect("checked above");
                match d.plan() {
                    Ok(c) => {
                        let candidates = c.to_vec();
                        let mut out = vec![Event::Plans { candidates }];
                        out.extend(self.enter(Planned));
                        out
                    }
                    Err(e) => self.failed(e),
                }
            }
            Request::SelectPlan { index } => {
                let d = self.deployment.as_mut().expect("checked above");
                if let Err(e) = d.select(index) {
                    return self.failed(e);
                }
                let plan = d.candidates()[index].clone();
                let mut out: Vec<Event> = self.enter(Navigating).into_iter().collect();
                out.push(Event::PlanSelected { index, plan });
                out.extend(self.enter(Aiming));
                out
            }
            Request::Aim { yaw, pitch, advance } => {
                let d = self.deployment.as_mut().expect("checked above");
                if let Err(e) = d.aim(yaw, pitch, advance) {
                    return self.failed(e);
                }
                let mut out = vec![Event::Aimed {
                    attempts: d.aim_attempts(),
                }];
                out.extend(self.enter(Aiming));
                out
            }
            Request::QueryAlignment => {
                let d = self.deployment.as_mut().expect("checked above");
                let a = match d.alignment() {
                    Ok(a) => a,
                    Err(e) => return self.failed(e),
                };
                let mut out = vec![Event::Alignment {
                    aligned: a.aligned,
                    deviation: a.deviation,
                    feasible: a.feasible,
                    correction: a.correction,
                }];
                out.extend(self.enter(if a.aligned { Aligned } else { Aiming }));
                out
            }
            Request::StartAutonomous => {
                let d = self.deployment.as_mut().expect("checked above");
                let plan = match d.start_autonomous() {
                    Ok(p) => p.clone(),
                    Err(e) => return self.failed(e),
                };
                let segments = d.segment_progress().map_or(0, |(_, n)| n);
                let mut out = vec![Event::Autonomous { plan, segments }];
                out.extend(self.enter(Steering));
                out
            }
            Request::RequestHold => {
                let d = self.deployment.as_mut().expect("checked above");
                d.request_hold();
                vec![Event::HoldRequested { t: d.time() }]
            }
            Request::Abort { reason } => {
                let reason = reason.unwrap_or_else(|| "operator abort".into());
                let mut out: Vec<Event> = self.enter(Aborted).into_iter().collect();
                if let Some(d) = self.deployment.as_mut() {
                    d.abort(&reason);
                    out.push(self.done_event());
                }
                out
            }
            Request::GetRecord => {
                let record = self.deployment.as_ref().expect("checked above").record();
                vec![Event::Record {
                    record: Box::new(record),
                }]
            }
            Request::GetSnapshot => vec![Event::Snapshot(Box::new(self.snapshot()))],
            Request::Resume { .. } => unreachable!("handled above"),
        }
    }

    /// Advances a steering session by one control tick.
    pub fn clock_tick(&mut self) -> Vec<Event> {
        if !self.is_steering() {
            return Vec::new();
        }
        let d = self.deployment.as_mut().expect("steering has a deployment");
        let (segment, segments) = d.segment_progress().unwrap_or((0, 0));
        let outcome = match d.tick() {
            Ok(o) => o,
            Err(e) => return self.failed(e),
        };
        let mut out = Vec::new();
        match outcome {
            TickOutcome::Running(r) => {
                if let Some(e) = self.stream(&r, segment, segments, false) {
                    out.push(e);
                }
            }
            TickOutcome::SegmentDone(r) => {
                out.extend(self.stream(&r, segment, segments, true));
                out.push(Event::Segment {
                    index: segment,
                    completed: true,
                    remaining: 0.0,
                });
            }
            TickOutcome::SegmentIncomplete { tick, remaining } => {
                out.extend(self.stream(&tick, segment, segments, true));
                out.push(Event::Segment {
                    index: segment,
                    completed: false,
                    remaining,
                });
            }
            TickOutcome::Finished(r) => {
                out.extend(self.stream(&r, segment, segments, true));
                out.push(Event::Segment {
                    index: segment,
                    completed: true,
                    remaining: 0.0,
                });
                out.extend(self.enter(SessionStage::Done));
                out.push(self.done_event());
            }
            TickOutcome::Stopped(_) => {
                out.extend(self.enter(SessionStage::Done));
                out.push(self.done_event());
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn load(
        &mut self,
        source: SceneSource,
        seed: u64,
        target: Option<bronchosteer::geometry::Vec3>,
        target_seed: Option<u64>,
        profile: Option<String>,
        overrides: Vec<String>,
        stream_every: Option<u32>,
    ) -> Vec<Event> {
        let built = (|| -> bronchosteer::Result<(Deployment, u32)> {
            let scene = match source {
                SceneSource::Generate { seed } => generate_scene(seed, &SceneParams::default())?,
                SceneSource::Path(p) => Scene::load(Path::new(&p))?,
            };
            let mut config = SimConfig::profile(profile.as_deref().unwrap_or(DEFAULT_PROFILE))?;
            for o in &overrides {
                config.apply_override(o)?;
            }
            let target = match target {
                Some(t) => t,
                None => scene.sample_target(target_seed.unwrap_or(TARGET_SEED_OFFSET + seed))?,
            };
            let every = stream_every.unwrap_or(1);
            if every == 0 {
                return Err(Error::Precondition("stream_every must be at least 1".into()));
            }
            Ok((
                Deployment::interactive(&scene, target, &config, Seeds::from_master(seed))?,
                every,
            ))
        })();
        match built {
            Ok((d, every)) => {
                let event = Event::SceneLoaded {
                    scene_hash: d.scene().hash(),
                    target: d.target(),
                    seed,
                    config: Box::new(d.config().clone()),
                };
                self.deployment = Some(d);
                self.stream_every = every;
                vec![event]
            }
            Err(e) => vec![self.domain_error(&e)],
        }
    }

    fn stream(&mut self, r: &TickRecord, segment: usize, segments: usize, force: bool) -> Option<Event> {
        let d = self.deployment.as_ref().expect("steering has a deployment");
        let gate = d.gate();
        let event = TickEvent {
            t: r.t,
            mode: r.mode,
            insert_v: r.insert_v,
            spin: r.spin,
            measured: r.meas,
            window_open: r.window_open,
            phase: gate.phase,
            hold_elapsed: gate.hold_elapsed,
            traj_err: r.traj_err,
            inserted: r.inserted,
            segment,
            segments,
        };
        let changed = self
            .last_tick
            .as_ref()
            .is_some_and(|l| l.window_open != event.window_open);
        let due = self.ticks.is_multiple_of(self.stream_every as u64);
        self.ticks += 1;
        self.last_tick = Some(event.clone());
        (force || changed || due).then_some(Event::Tick(event))
    }

    /// Moves to `stage`, returning the change event if there was one.
    fn enter(&mut self, stage: SessionStage) -> Option<Event> {
        if stage == self.stage {
            return None;
        }
        let previous = std::mem::replace(&mut self.stage, stage);
        Some(Event::Stage { stage, previous })
    }

    /// Error reply for a failed simulator call, plus the terminal events if
    /// the failure ended the deployment.
    fn failed(&mut self, e: Error) -> Vec<Event> {
        let mut out = vec![self.domain_error(&e)];
        let ended = self.deployment.as_ref().is_some_and(|d| d.stage() == Stage::Done);
        if ended && !self.stage.is_terminal() {
            out.extend(self.enter(SessionStage::Done));
            out.push(self.done_event());
        }
        out
    }

    fn done_event(&self) -> Event {
        let d = self.deployment.as_ref().expect("finished deployment");
        let record = d.record();
        Event::Done {
            outcome: d.outcome().cloned().unwrap_or(Outcome::Aborted {
                reason: "in progress".into(),
            }),
            metrics: metrics(&record),
        }
    }

    fn domain_error(&self, e: &Error) -> Event {
        Event::error(ErrorCode::Domain, format!("{}: {e}", e.kind()), Some(self.stage))
    }

    fn out_of_order(&self, req: &Request) -> Event {
        let message = if matches!(req, Request::RequestPlans) && self.deployment.is_none() {
            "request_plans needs a loaded scene".to_string()
        } else {
            format!("{} is not allowed in stage {:?}", req.name(), self.stage).to_lowercase()
        };
        Event::error(ErrorCode::OutOfOrder, message, Some(self.stage))
    }
}

/// Runs a whole request stream through one session without a wall clock:
/// once steering starts, the simulated clock runs to the end of the
/// deployment before the next request is read.
pub fn run_oneshot<R: std::io::BufRead, W: std::io::Write>(input: R, mut output: W) -> std::io::Result<()> {
    let mut session = Session::new("oneshot");
    fn emit<W: std::io::Write>(events: &[Envelope<Event>], out: &mut W) -> std::io::Result<()> {
        for e in events {
            writeln!(out, "{}", e.to_line())?;
        }
        Ok(())
    }
    let hello = Envelope::new(Event::Session {
        session_id: session.id().to_string(),
        resumed: false,
    });
    emit(&[hello], &mut output)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let replies = session.handle_line(&line);
        emit(&replies, &mut output)?;
        while session.is_steering() {
            let ticks: Vec<_> = session.clock_tick().into_iter().map(Envelope::new).collect();
            emit(&ticks, &mut output)?;
        }
    }
    output.flush()
}

/// Request id of a raw line, if it has one.
pub fn request_id(line: &str) -> Option<Value> {
    serde_json::from_str::<Value>(line).ok()?.get("id").cloned()
}
