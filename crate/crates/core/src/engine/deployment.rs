//! One simulated procedure: registration, planning, navigation, aiming,
//! replanning and the gated autonomous steer.
//!
//! The needle lives in tissue coordinates, which coincide with the scene
//! (CT) frame. The tracker observes it through the true chest pose, the
//! internal deformation and the breathing offset; the controller only sees
//! those readings mapped back through the estimated registration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anatomy::Scene;
use crate::control::{trajectory_error, ControlCommand, Controller, SegmentLog, TickRecord};
use crate::error::{Error, Result};
use crate::geometry::{any_perpendicular, yaw_pitch_rotation, Pose, Vec3};
use crate::needle::{sense, step, NeedleState, TipMeasurement};
use crate::planner::{
    check_alignment, plan_candidates, replan, segment_plan, Alignment, PathSegment, PlanRequest, ThreeStagePlan,
};
use crate::registration::{simulate_registration, RegistrationOutcome, RigidTransform};
use crate::respiration::{gate_update, marker_displacement, tissue_offset, GateSample, GateState};

use super::config::{PlanChoice, SimConfig};
use super::record::{
    AdverseEvent, DeploymentKind, DeploymentRecord, Outcome, Seeds, SessionAction, TimedPoint, TrackedSample,
    RECORD_VERSION,
};

/// Procedure stage as seen by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Registered,
    Planned,
    Aiming,
    Aligned,
    Steering,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SegPhase {
    /// Hold requested; waiting for the window since the given time.
    Waiting {
        since: f64,
    },
    Inserting,
    /// Segment finished; idle until the current window closes.
    Draining,
}

#[derive(Debug, Clone)]
struct AutoRun {
    plan: ThreeStagePlan,
    segments: Vec<PathSegment>,
    index: usize,
    phase: SegPhase,
    log: SegmentLog,
    controller: Controller,
}

/// What one control tick produced.
#[derive(Debug, Clone, PartialEq)]
pub enum TickOutcome {
    Running(TickRecord),
    /// The current segment reached its end.
    SegmentDone(TickRecord),
    /// The window closed early; the remainder waits for the next hold.
    SegmentIncomplete {
        tick: TickRecord,
        remaining: f64,
    },
    /// Last segment done; the deployment is complete.
    Finished(TickRecord),
    /// The deployment ended abnormally.
    Stopped(Outcome),
}

/// Offset used for numerically differentiating the tissue → tracker map.
const JACOBIAN_STEP: f64 = 1e-3;
const PIERCE_RESAMPLES: usize = 50;
const REPLAN_RETRIES: u64 = 3;

pub struct Deployment {
    pub(super) scene: Scene,
    pub(super) target: Vec3,
    pub(super) config: SimConfig,
    pub(super) seeds: Seeds,
    pub(super) truth: RegistrationOutcome,
    pub(super) em_to_scene: RigidTransform,
    pub(super) candidates: Vec<ThreeStagePlan>,
    pub(super) selected: Option<usize>,
    pub(super) needle: NeedleState,
    pub(super) gate: GateState,
    tick_index: u64,
    user_hold: bool,
    rng_nav: ChaCha8Rng,
    rng_aim: ChaCha8Rng,
    rng_needle: ChaCha8Rng,
    pub(super) rng_sense: ChaCha8Rng,
    rng_breath: ChaCha8Rng,
    run: Option<AutoRun>,
    pub(super) segments: Vec<SegmentLog>,
    pub(super) tracked: Vec<TrackedSample>,
    pub(super) true_tip: Vec<TimedPoint>,
    breath: Vec<GateSample>,
    pub(super) adverse: Vec<AdverseEvent>,
    aim_attempts: usize,
    pub(super) min_clearance: f64,
    pub(super) stage: Stage,
    pub(super) outcome: Option<Outcome>,
    executed_plan: Option<ThreeStagePlan>,
    /// Measured pose and probe seed of the last green alignment check.
    aligned_at: Option<(Pose, u64)>,
    session: Option<Vec<SessionAction>>,
}

impl Deployment {
    /// Sets up the procedure and performs the intra-operative registration.
    pub fn new(scene: &Scene, target: Vec3, config: &SimConfig, seeds: Seeds) -> Result<Self> {
        config.validate()?;
        let truth = simulate_registration(scene, &config.registration, seeds.registration)?;
        let em_to_scene = truth.icp.transform;
        Ok(Self {
            scene: scene.clone(),
            target,
            config: config.clone(),
            seeds,
            truth,
            em_to_scene,
            candidates: Vec::new(),
            selected: None,
            needle: NeedleState::new(Pose::identity(), 0.0),
            gate: GateState::new(),
            tick_index: 0,
            user_hold: false,
            rng_nav: ChaCha8Rng::seed_from_u64(seeds.navigation),
            rng_aim: ChaCha8Rng::seed_from_u64(seeds.aiming),
            rng_needle: ChaCha8Rng::seed_from_u64(seeds.needle),
            rng_sense: ChaCha8Rng::seed_from_u64(seeds.sensing),
            rng_breath: ChaCha8Rng::seed_from_u64(seeds.breath),
            run: None,
            segments: Vec::new(),
            tracked: Vec::new(),
            true_tip: Vec::new(),
            breath: Vec::new(),
            adverse: Vec::new(),
            aim_attempts: 0,
            min_clearance: f64::INFINITY,
            stage: Stage::Registered,
            outcome: None,
            executed_plan: None,
            aligned_at: None,
            session: None,
        })
    }

    /// Deployment driven call by call from outside; its record carries the
    /// call log so it replays exactly.
    pub fn interactive(scene: &Scene, target: Vec3, config: &SimConfig, seeds: Seeds) -> Result<Self> {
        let mut d = Self::new(scene, target, config, seeds)?;
        d.session = Some(Vec::new());
        Ok(d)
    }

    fn log(&mut self, action: SessionAction) {
        let Some(log) = self.session.as_mut() else {
            return;
        };
        match (log.last_mut(), &action) {
            (Some(SessionAction::Ticks { count }), SessionAction::Ticks { count: n }) => *count += n,
            _ => log.push(action),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn target(&self) -> Vec3 {
        self.target
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn candidates(&self) -> &[ThreeStagePlan] {
        &self.candidates
    }

    pub fn em_to_scene(&self) -> &RigidTransform {
        &self.em_to_scene
    }

    pub fn registration(&self) -> &RegistrationOutcome {
        &self.truth
    }

    pub fn needle(&self) -> &NeedleState {
        &self.needle
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn time(&self) -> f64 {
        self.tick_index as f64 * self.config.control.tick
    }

    pub fn executed_plan(&self) -> Option<&ThreeStagePlan> {
        self.executed_plan.as_ref()
    }

    /// Index of the segment being executed and the number of segments.
    pub fn segment_progress(&self) -> Option<(usize, usize)> {
        self.run.as_ref().map(|r| (r.index, r.segments.len()))
    }

    fn finish(&mut self, outcome: Outcome) {
        if self.outcome.is_none() {
            self.outcome = Some(outcome);
        }
        self.stage = Stage::Done;
    }

    /// Ends the deployment at the caller's request.
    pub fn abort(&mut self, reason: &str) {
        self.log(SessionAction::Abort {
            reason: reason.to_string(),
        });
        if let Some(run) = self.run.take() {
            self.segments.push(run.log);
        }
        self.finish(Outcome::Aborted {
            reason: reason.to_string(),
        });
    }

    /// Latches a breath-hold request for the next gate update.
    pub fn request_hold(&mut self) {
        self.log(SessionAction::Hold);
        self.user_hold = true;
    }

    // ---- plant -------------------------------------------------------

    fn breathing_offset(&self, p: &Vec3, gate: Option<&GateState>) -> Vec3 {
        match gate {
            Some(g) => tissue_offset(&self.config.breath, g, p),
            None => Vec3::zeros(),
        }
    }

    /// Tracker-frame position of the tissue point `p`.
    fn physical(&self, p: &Vec3, gate: Option<&GateState>) -> Vec3 {
        self.truth.ct_to_em_true(&(p + self.breathing_offset(p, gate)))
    }

    /// Tracker-frame image of the direction `d` attached at `p`.
    fn physical_dir(&self, p: &Vec3, d: &Vec3, gate: Option<&GateState>) -> Vec3 {
        let h = JACOBIAN_STEP;
        (self.physical(&(p + d * h), gate) - self.physical(&(p - d * h), gate)).normalize()
    }

    /// Raw tracker reading of the tip. `gate` is `None` while the tissue is
    /// held at its CT state.
    fn read_tracker(&mut self, t: f64, gate: Option<&GateState>) -> TipMeasurement {
        let tip = self.needle.tip;
        let pose = Pose::from_heading(
            self.physical(&tip.position, gate),
            &self.physical_dir(&tip.position, &tip.heading(), gate),
        );
        sense(
            &pose,
            &RigidTransform::identity(),
            &self.config.noise,
            t,
            &mut self.rng_sense,
        )
    }

    /// Tracker reading mapped into the scene through the registration.
    pub fn to_scene(&self, m: &TipMeasurement) -> TipMeasurement {
        TipMeasurement {
            position: self.em_to_scene.apply(&m.position),
            heading: self.em_to_scene.apply_vector(&m.heading).normalize(),
            timestamp: m.timestamp,
        }
    }

    /// Averaged stationary reading in the scene frame, as a pose whose roll
    /// is arbitrary.
    fn measured_pose(&mut self) -> Pose {
        let n = self.config.execution.align_samples;
        let mut pos = Vec3::zeros();
        let mut head = Vec3::zeros();
        for _ in 0..n {
            let m = self.read_tracker(0.0, None);
            let m = self.to_scene(&m);
            pos += m.position;
            head += m.heading;
        }
        Pose::from_heading(pos / n as f64, &head.normalize())
    }

    fn note_clearance(&mut self, t: f64) -> f64 {
        let p = self.needle.tip.position;
        let c = self.scene.clearance(&p);
        self.min_clearance = self.min_clearance.min(c);
        if c < 0.0 && self.adverse.is_empty() {
            self.adverse.push(AdverseEvent {
                t,
                kind: "collision".into(),
                position: p,
                clearance: c,
            });
        }
        c
    }

    // ---- stages 1 and 2 ----------------------------------------------

    /// Generates the candidate plans.
    pub fn plan(&mut self) -> Result<&[ThreeStagePlan]> {
        self.log(SessionAction::Plan);
        if self.stage != Stage::Registered && self.stage != Stage::Planned {
            return Err(Error::Precondition(format!("cannot plan in stage {:?}", self.stage)));
        }
        let req = PlanRequest::new(self.target, self.seeds.planning);
        match plan_candidates(&self.scene, &req, &self.config.planner) {
            Ok(c) => {
                self.candidates = c;
                self.stage = Stage::Planned;
                Ok(&self.candidates)
            }
            Err(e) => {
                if matches!(e, Error::NoPlanFound { .. }) {
                    self.finish(Outcome::from_error(&e));
                }
                Err(e)
            }
        }
    }

    /// Drives the bronchoscope to the chosen piercing site and pierces,
    /// leaving the needle near the planned start with execution noise.
    pub fn select(&mut self, index: usize) -> Result<()> {
        self.log(SessionAction::Select { index });
        if self.stage != Stage::Planned {
            return Err(Error::Precondition(format!(
                "cannot select a plan in stage {:?}",
                self.stage
            )));
        }
        let plan = self
            .candidates
            .get(index)
            .ok_or_else(|| Error::Precondition(format!("plan index {index} out of range")))?;
        let nominal = plan.needle_start();
        let ex = self.config.execution;
        let pos_noise = Normal::new(0.0, ex.pierce_position_noise).expect("finite std");
        let ang_noise = Normal::new(0.0, ex.pierce_heading_noise).expect("finite std");
        let need = self.scene.clearance_min;
        let mut start = nominal;
        for _ in 0..PIERCE_RESAMPLES {
            let shift = nominal.lateral_x() * pos_noise.sample(&mut self.rng_nav)
                + nominal.lateral_y() * pos_noise.sample(&mut self.rng_nav);
            let tilt = yaw_pitch_rotation(ang_noise.sample(&mut self.rng_nav), ang_noise.sample(&mut self.rng_nav));
            let candidate = Pose::new(nominal.position + shift, nominal.orientation * tilt);
            if self.scene.clearance(&candidate.position) >= need {
                start = candidate;
                break;
            }
        }
        self.needle = NeedleState::new(start, 0.0);
        self.selected = Some(index);
        self.stage = Stage::Aiming;
        self.note_clearance(0.0);
        Ok(())
    }

    /// Alignment indicator computed from averaged tracker readings.
    pub fn alignment(&mut self) -> Result<Alignment> {
        self.log(SessionAction::Alignment);
        if self.stage != Stage::Aiming && self.stage != Stage::Aligned {
            return Err(Error::Precondition(format!(
                "cannot check alignment in stage {:?}",
                self.stage
            )));
        }
        let pose = self.measured_pose();
        let seed = self.seeds.planning ^ (self.aim_attempts as u64 + 1).wrapping_mul(0x51_7CC1_B727_220A);
        let a = check_alignment(&pose, &self.target, &self.scene, &self.config.planner, seed);
        self.aligned_at = a.aligned.then_some((pose, seed));
        self.stage = if a.aligned { Stage::Aligned } else { Stage::Aiming };
        Ok(a)
    }

    /// Teleoperated aiming: tip-frame yaw and pitch (rad) about the measured
    /// frame plus a straight advance (mm). Actuation noise applies.
    pub fn aim(&mut self, yaw: f64, pitch: f64, advance: f64) -> Result<()> {
        self.log(SessionAction::Aim { yaw, pitch, advance });
        if self.stage != Stage::Aiming && self.stage != Stage::Aligned {
            return Err(Error::Precondition(format!("cannot aim in stage {:?}", self.stage)));
        }
        if !(yaw.is_finite() && pitch.is_finite() && advance.is_finite()) || advance < 0.0 {
            return Err(Error::Precondition("aim deltas must be finite and advance >= 0".into()));
        }
        if self.aim_attempts >= self.config.execution.max_aim_attempts {
            let attempts = self.aim_attempts;
            self.finish(Outcome::AlignmentFailed { attempts });
            return Err(Error::AlignmentFailed { attempts });
        }
        let ex = self.config.execution;
        let gain = Normal::new(0.0, ex.aim_gain_noise).expect("finite std");
        let extra = Normal::new(0.0, ex.aim_angle_noise).expect("finite std");
        let y = yaw * (1.0 + gain.sample(&mut self.rng_aim)) + extra.sample(&mut self.rng_aim);
        let p = pitch * (1.0 + gain.sample(&mut self.rng_aim)) + extra.sample(&mut self.rng_aim);
        let frame = self.measured_pose();
        if advance > 0.0 {
            let ahead = frame.position + frame.heading() * advance;
            if self.scene.clearance(&ahead) < self.scene.clearance_min {
                return Err(Error::Precondition(format!(
                    "advancing {advance} mm would leave less than {} mm clearance",
                    self.scene.clearance_min
                )));
            }
        }
        let world = frame.orientation * yaw_pitch_rotation(y, p) * frame.orientation.inverse();
        let mut tip = self.needle.tip;
        tip.orientation = world * tip.orientation;
        tip.orientation.renormalize();
        tip.position += tip.heading() * advance;
        self.needle.tip = tip;
        self.aim_attempts += 1;
        self.aligned_at = None;
        self.stage = Stage::Aiming;
        self.note_clearance(0.0);
        Ok(())
    }

    pub fn aim_attempts(&self) -> usize {
        self.aim_attempts
    }

    // ---- stage 3 -----------------------------------------------------

    /// Replans from the measured tip and arms the autonomous executor.
    pub fn start_autonomous(&mut self) -> Result<&ThreeStagePlan> {
        self.log(SessionAction::Start);
        if self.stage != Stage::Aligned {
            return Err(Error::Precondition(format!(
                "autonomous steering requires alignment (stage {:?})",
                self.stage
            )));
        }
        let prior = self.candidates[self.selected.expect("selected plan")].clone();
        // the probe that turned the indicator green already found a path
        // from this measurement; the same seed reproduces it
        let (pose, seed) = self.aligned_at.expect("aligned stage has a probe");
        let mut result = replan(&pose, &self.target, &self.scene, &prior, &self.config.planner, seed);
        for k in 1..=REPLAN_RETRIES {
            if result.is_ok() {
                break;
            }
            result = replan(
                &pose,
                &self.target,
                &self.scene,
                &prior,
                &self.config.planner,
                seed ^ k.wrapping_mul(0xA11),
            );
        }
        let plan = match result {
            Ok(p) => p,
            Err(e) => {
                self.finish(Outcome::from_error(&e));
                return Err(e);
            }
        };
        let segments = segment_plan(&plan.needle_path, self.config.execution.segment_len)?;
        let mut controller = Controller::new(self.config.control, self.scene.kappa_max, &pose.heading(), 0.0);
        // initial bevel estimate: true bevel direction seen through the
        // registration, off by an unknown roll
        let tip = self.needle.tip;
        let bevel = tip.orientation * Vec3::new(self.needle.roll.cos(), self.needle.roll.sin(), 0.0);
        let bevel_scene = self
            .em_to_scene
            .apply_vector(&self.physical_dir(&tip.position, &bevel, None));
        let offset = Normal::new(0.0, self.config.noise.roll_offset_std)
            .expect("finite std")
            .sample(&mut self.rng_nav);
        let truth_roll = controller.roll.roll_of(&bevel_scene);
        controller.roll.spin(truth_roll + offset);
        self.needle.inserted = 0.0;
        self.gate = GateState::new();
        self.tick_index = 0;
        let first = &segments[0];
        self.run = Some(AutoRun {
            log: SegmentLog {
                index: 0,
                s_start: first.s_start,
                s_end: first.s_end,
                ticks: Vec::new(),
                windows_used: 0,
                completed: false,
            },
            plan: plan.clone(),
            segments,
            index: 0,
            phase: SegPhase::Waiting { since: 0.0 },
            controller,
        });
        self.executed_plan = Some(plan);
        self.stage = Stage::Steering;
        Ok(self.executed_plan.as_ref().expect("plan set"))
    }

    /// Advances the autonomous stage by one control tick.
    pub fn tick(&mut self) -> Result<TickOutcome> {
        self.log(SessionAction::Ticks { count: 1 });
        if self.stage != Stage::Steering {
            return Err(Error::Precondition(format!("cannot tick in stage {:?}", self.stage)));
        }
        let mut run = self.run.take().expect("armed run");
        let dt = self.config.control.tick;
        let window_len = self.config.execution.window_len;
        let t = self.tick_index as f64 * dt;

        let wants_hold = matches!(run.phase, SegPhase::Waiting { .. }) || self.user_hold;
        self.user_hold = false;
        let was_open = self.gate.window_open;
        self.gate = gate_update(&self.gate, &self.config.breath, t, wants_hold, window_len);
        let gate = self.gate;
        let marker = marker_displacement(&self.config.breath, &gate, &mut self.rng_breath);
        self.breath.push(GateSample {
            t,
            marker_mm: marker,
            phase: gate.phase,
            window_open: gate.window_open,
        });

        let raw = self.read_tracker(t, Some(&gate));
        let meas = self.to_scene(&raw);
        let inserted = self.needle.inserted;
        let seg_end = run.segments[run.index].s_end;

        if gate.window_open && !was_open {
            if let SegPhase::Waiting { .. } = run.phase {
                run.phase = SegPhase::Inserting;
                run.log.windows_used += 1;
            }
            run.controller.reset_position_filter();
        }
        if gate.window_open {
            run.controller.observe(&meas, inserted);
        }

        let mut cmd = if run.phase == SegPhase::Inserting {
            run.controller
                .tick(&meas, &run.plan.needle_path, inserted, seg_end, &gate, window_len)
        } else {
            ControlCommand::idle()
        };
        if !gate.window_open {
            cmd = ControlCommand::idle();
        }

        let clearance = self.note_clearance(t);
        let record = TickRecord {
            t,
            mode: cmd.mode,
            insert_v: cmd.insert_v,
            spin: cmd.spin,
            meas: raw.position,
            truth: self.needle.tip.position,
            window_open: gate.window_open,
            traj_err: trajectory_error(&run.plan.needle_path, inserted, &meas.position),
            inserted,
            true_clearance: clearance,
        };
        run.log.ticks.push(record);
        self.tracked.push(TrackedSample {
            t,
            position: raw.position,
            inserted,
            window_open: gate.window_open,
        });
        self.true_tip.push(TimedPoint {
            t,
            position: self.needle.tip.position,
        });

        if clearance < 0.0 {
            self.segments.push(run.log);
            let outcome = Outcome::SafetyStop { clearance, t };
            self.finish(outcome.clone());
            return Ok(TickOutcome::Stopped(outcome));
        }

        let mut result = TickOutcome::Running(record);
        match run.phase {
            SegPhase::Waiting { since } => {
                if t - since > self.config.execution.max_gate_wait {
                    self.segments.push(run.log);
                    let outcome = Outcome::GateTimeout { waited: t - since };
                    self.finish(outcome.clone());
                    return Ok(TickOutcome::Stopped(outcome));
                }
            }
            SegPhase::Inserting => {
                if inserted >= seg_end - 1e-9 {
                    run.log.completed = true;
                    if run.index + 1 == run.segments.len() {
                        self.segments.push(run.log);
                        self.finish(Outcome::Completed);
                        return Ok(TickOutcome::Finished(record));
                    }
                    run.phase = SegPhase::Draining;
                    result = TickOutcome::SegmentDone(record);
                } else if cmd.mode == crate::control::Mode::Idle {
                    let remaining = seg_end - inserted;
                    if run.log.windows_used >= self.config.execution.max_segment_windows {
                        self.segments.push(run.log);
                        let outcome = Outcome::SegmentIncomplete { remaining };
                        self.finish(outcome.clone());
                        return Ok(TickOutcome::Stopped(outcome));
                    }
                    run.phase = SegPhase::Waiting { since: t };
                    result = TickOutcome::SegmentIncomplete {
                        tick: record,
                        remaining,
                    };
                }
            }
            SegPhase::Draining => {
                if !gate.window_open {
                    let finished = std::mem::replace(
                        &mut run.log,
                        SegmentLog {
                            index: run.index + 1,
                            s_start: run.segments[run.index + 1].s_start,
                            s_end: run.segments[run.index + 1].s_end,
                            ticks: Vec::new(),
                            windows_used: 0,
                            completed: false,
                        },
                    );
                    self.segments.push(finished);
                    run.index += 1;
                    run.phase = SegPhase::Waiting { since: t };
                }
            }
        }

        self.needle = step(
            &self.needle,
            cmd.insert_v,
            cmd.spin,
            dt,
            self.scene.kappa_max,
            &self.config.noise,
            &mut self.rng_needle,
        )?;
        run.controller.applied(&cmd);
        self.tick_index += 1;
        self.run = Some(run);
        Ok(result)
    }

    /// Runs ticks until the current segment completes, the window closes
    /// before completion, or the deployment ends.
    pub fn execute_segment(&mut self) -> Result<SegmentLog> {
        loop {
            match self.tick()? {
                TickOutcome::Running(_) => {}
                TickOutcome::SegmentDone(_) | TickOutcome::Finished(_) => {
                    let log = match &self.run {
                        Some(run) if !matches!(self.stage, Stage::Done) => run.log.clone(),
                        _ => self.segments.last().cloned().expect("segment logged"),
                    };
                    return Ok(log);
                }
                TickOutcome::SegmentIncomplete { remaining, .. } => return Err(Error::SegmentIncomplete { remaining }),
                TickOutcome::Stopped(o) => {
                    return Err(match o {
                        Outcome::SafetyStop { clearance, t } => Error::SafetyStop { clearance, t },
                        Outcome::GateTimeout { waited } => Error::GateTimeout { waited },
                        Outcome::SegmentIncomplete { remaining } => Error::SegmentIncomplete { remaining },
                        other => Error::Precondition(format!("deployment stopped: {}", other.as_str())),
                    })
                }
            }
        }
    }

    /// Snapshot of the deployment as a record.
    pub fn record(&self) -> DeploymentRecord {
        let mut segments = self.segments.clone();
        if let Some(run) = &self.run {
            if self.stage == Stage::Steering {
                segments.push(run.log.clone());
            }
        }
        let outcome = self.outcome.clone().unwrap_or(Outcome::Aborted {
            reason: "in progress".into(),
        });
        DeploymentRecord {
            version: RECORD_VERSION,
            kind: DeploymentKind::Robot,
            scene_hash: self.scene.hash(),
            target: self.target,
            em_to_scene: self.em_to_scene,
            seeds: self.seeds,
            config: self.config.clone(),
            candidate_count: self.candidates.len(),
            selected_plan: self.selected,
            plan: self.executed_plan.clone(),
            aiming_attempts: self.aim_attempts,
            segments,
            tracked_tip: self.tracked.clone(),
            true_tip: self.true_tip.clone(),
            breath_trace: self.breath.clone(),
            final_state: self.selected.map(|_| self.needle),
            adverse_events: self.adverse.clone(),
            min_true_clearance: self.min_clearance,
            margin_flag: self.min_clearance < self.scene.clearance_min,
            outcome,
            session: self.session.clone(),
        }
    }
}

/// Unit vector perpendicular to `d`, rotated by `angle` about it.
pub(super) fn perpendicular_at(d: &Vec3, angle: f64) -> Vec3 {
    let u = any_perpendicular(d);
    let v = d.cross(&u);
    u * angle.cos() + v * angle.sin()
}

/// Scripted deployment: lowest-cost (or configured) plan, corrective aiming
/// until the indicator turns green, replanning and the gated steer.
pub fn run_deployment(scene: &Scene, target: Vec3, config: &SimConfig, seeds: Seeds) -> Result<DeploymentRecord> {
    let mut d = Deployment::new(scene, target, config, seeds)?;
    scripted(&mut d);
    Ok(d.record())
}

/// Re-issues the logged calls of an interactive deployment.
pub(super) fn replay_session(
    scene: &Scene,
    target: Vec3,
    config: &SimConfig,
    seeds: Seeds,
    actions: &[SessionAction],
) -> Result<DeploymentRecord> {
    let mut d = Deployment::interactive(scene, target, config, seeds)?;
    // rejected calls are part of the log and are re-issued as such
    for action in actions {
        match action {
            SessionAction::Plan => {
                let _ = d.plan();
            }
            SessionAction::Select { index } => {
                let _ = d.select(*index);
            }
            SessionAction::Alignment => {
                let _ = d.alignment();
            }
            SessionAction::Aim { yaw, pitch, advance } => {
                let _ = d.aim(*yaw, *pitch, *advance);
            }
            SessionAction::Start => {
                let _ = d.start_autonomous();
            }
            SessionAction::Ticks { count } => {
                for _ in 0..*count {
                    let _ = d.tick();
                }
            }
            SessionAction::Hold => d.request_hold(),
            SessionAction::Abort { reason } => d.abort(reason),
        }
    }
    Ok(d.record())
}

fn scripted(d: &mut Deployment) {
    if d.plan().is_err() {
        if d.outcome.is_none() {
            d.finish(Outcome::Failed {
                error: "planning failed".into(),
            });
        }
        return;
    }
    let index = match d.config.execution.plan_choice {
        PlanChoice::LowestCost => 0,
        PlanChoice::Index(i) => i.min(d.candidates.len() - 1),
    };
    if let Err(e) = d.select(index) {
        d.finish(Outcome::from_error(&e));
        return;
    }
    let max = d.config.execution.max_aim_attempts;
    loop {
        let a = match d.alignment() {
            Ok(a) => a,
            Err(e) => {
                d.finish(Outcome::from_error(&e));
                return;
            }
        };
        if a.aligned {
            break;
        }
        if d.aim_attempts >= max {
            d.finish(Outcome::AlignmentFailed {
                attempts: d.aim_attempts,
            });
            return;
        }
        let (yaw, pitch) = a.correction;
        if let Err(e) = d.aim(yaw, pitch, 0.0) {
            d.finish(Outcome::from_error(&e));
            return;
        }
    }
    if d.start_autonomous().is_err() {
        return;
    }
    loop {
        match d.execute_segment() {
            Ok(_) if d.stage == Stage::Done => return,
            Ok(_) | Err(Error::SegmentIncomplete { .. }) if d.stage != Stage::Done => {}
            _ => return,
        }
    }
}
