//! Closed-loop steering for the autonomous stage.
//!
//! The controller works in the scene frame on registered 5-DOF measurements.
//! Because the sensor does not see roll, the bevel orientation is tracked
//! against a controller frame that is parallel-transported along the measured
//! headings: commanded spin is dead-reckoned and the accumulated offset is
//! corrected from the observed bend direction whenever the needle has been
//! inserted on a roughly constant bevel.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{path_length, path_pose_at, rotation_between, wrap_angle, Arc, Pose, Vec3};
use crate::needle::TipMeasurement;
use crate::respiration::GateState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    SpinningToRoll,
    Inserting,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Idle => "idle",
            Mode::SpinningToRoll => "spinning_to_roll",
            Mode::Inserting => "inserting",
        }
    }
}

const WINDOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub insert_v: f64,
    pub spin: f64,
    pub mode: Mode,
}

impl ControlCommand {
    pub fn idle() -> Self {
        Self {
            insert_v: 0.0,
            spin: 0.0,
            mode: Mode::Idle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollEstimate {
    pub roll: f64,
    pub confidence: f64,
}

/// How the controller follows near-straight demands, which a bevel tip
/// cannot produce without rotating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StraightMode {
    /// Spin at the rate cap while inserting.
    #[default]
    ContinuousSpin,
    /// Alternate full spinning revolutions with fixed-bevel insertion so the
    /// mean curvature matches the demand.
    DutyCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlParams {
    pub lookahead: f64,
    /// Roll error above which the bevel is turned before inserting (rad).
    pub roll_gate: f64,
    pub spin_max: f64,
    pub insert_speed: f64,
    pub tick: f64,
    /// Demands below this fraction of the needle curvature count as straight.
    pub straight_fraction: f64,
    pub straight_mode: StraightMode,
    /// Insertion (mm) over which the bend direction is fitted.
    pub roll_fit_length: f64,
    /// Largest spread of the dead-reckoned roll inside the fit window (rad).
    pub roll_fit_spread: f64,
    /// Per-tick blending gain of the fitted roll offset.
    pub roll_blend: f64,
    /// Smallest smoothing weight of the newest deviation from the plan; a
    /// window's first readings are averaged evenly.
    pub position_filter: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            lookahead: 5.0,
            roll_gate: 20f64.to_radians(),
            spin_max: std::f64::consts::TAU,
            insert_speed: crate::needle::DEFAULT_INSERT_SPEED,
            tick: 0.05,
            straight_fraction: 0.3,
            straight_mode: StraightMode::ContinuousSpin,
            roll_fit_length: 5.0,
            roll_fit_spread: 0.3,
            roll_blend: 0.05,
            position_filter: 0.05,
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lookahead", self.lookahead),
            ("spin_max", self.spin_max),
            ("insert_speed", self.insert_speed),
            ("tick", self.tick),
            ("roll_fit_length", self.roll_fit_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("control.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("roll_blend", self.roll_blend),
            ("position_filter", self.position_filter),
            ("straight_fraction", self.straight_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("control.{name} must lie in [0, 1]")));
            }
        }
        if self.position_filter == 0.0 {
            return Err(Error::Config("control.position_filter must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct FitSample {
    s: f64,
    heading: Vec3,
    frame: UnitQuaternion<f64>,
    roll: f64,
}

/// Bevel roll tracked against a frame transported along measured headings.
#[derive(Debug, Clone)]
pub struct RollEstimator {
    frame: UnitQuaternion<f64>,
    estimate: RollEstimate,
    history: VecDeque<FitSample>,
}

impl RollEstimator {
    /// Starts with a controller frame whose heading is `heading` and whose
    /// lateral axes come from the minimal rotation off `+z`.
    pub fn new(heading: &Vec3, roll: f64) -> Self {
        Self {
            frame: rotation_between(&Vec3::z(), heading),
            estimate: RollEstimate {
                roll: wrap_angle(roll),
                confidence: 0.5,
            },
            history: VecDeque::new(),
        }
    }

    pub fn frame(&self) -> Pose {
        Pose::new(Vec3::zeros(), self.frame)
    }

    pub fn estimate(&self) -> RollEstimate {
        self.estimate
    }

    /// Bevel direction implied by the estimate, in the scene frame.
    pub fn bend_direction(&self) -> Vec3 {
        let (s, c) = self.estimate.roll.sin_cos();
        self.frame * Vec3::new(c, s, 0.0)
    }

    /// Roll, in the controller frame, of a scene-frame lateral direction.
    pub fn roll_of(&self, dir: &Vec3) -> f64 {
        let x = self.frame * Vec3::x();
        let y = self.frame * Vec3::y();
        dir.dot(&y).atan2(dir.dot(&x))
    }

    /// Applies a commanded spin increment.
    pub fn spin(&mut self, d_roll: f64) {
        self.estimate.roll = wrap_angle(self.estimate.roll + d_roll);
    }

    /// Transports the frame to a new measured heading and, once enough curved
    /// insertion on a steady bevel has been seen, corrects the roll from the
    /// fitted bend direction.
    pub fn observe(&mut self, heading: &Vec3, inserted: f64, params: &ControlParams) {
        let current = self.frame * Vec3::z();
        self.frame = rotation_between(&current, heading) * self.frame;
        if let Some(last) = self.history.back() {
            if inserted <= last.s {
                return;
            }
        }
        self.history.push_back(FitSample {
            s: inserted,
            heading: heading.normalize(),
            frame: self.frame,
            roll: self.estimate.roll,
        });
        while let Some(first) = self.history.front() {
            if inserted - first.s > params.roll_fit_length {
                self.history.pop_front();
            } else {
                break;
            }
        }
        if let Some((offset, confidence)) = self.fit_offset(params) {
            let gain = params.roll_blend * confidence;
            self.estimate.roll = wrap_angle(self.estimate.roll + gain * offset);
            for h in self.history.iter_mut() {
                h.roll = wrap_angle(h.roll + gain * offset);
            }
            self.estimate.confidence = confidence;
        }
    }

    /// Offset between the fitted and the dead-reckoned roll at the window
    /// midpoint.
    fn fit_offset(&self, params: &ControlParams) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n < 8 {
            return None;
        }
        let span = self.history.back()?.s - self.history.front()?.s;
        if span < params.roll_fit_length * 0.95 {
            return None;
        }
        let mean_s = self.history.iter().map(|h| h.s).sum::<f64>() / n as f64;
        let mean_h = self.history.iter().map(|h| h.heading).sum::<Vec3>() / n as f64;
        let mut sxx = 0.0;
        let mut sxh = Vec3::zeros();
        for h in &self.history {
            let ds = h.s - mean_s;
            sxx += ds * ds;
            sxh += (h.heading - mean_h) * ds;
        }
        let slope = sxh / sxx;
        let mid = &self.history[n / 2];
        let mid_heading = mid.frame * Vec3::z();
        let lateral = slope - mid_heading * mid_heading.dot(&slope);
        let kappa = lateral.norm();
        if kappa < 1e-6 {
            return None;
        }
        // the bevel must have stayed put for the fit to describe one plane
        let spread = self
            .history
            .iter()
            .map(|h| wrap_angle(h.roll - mid.roll).abs())
            .fold(0.0, f64::max);
        if spread > params.roll_fit_spread {
            return None;
        }
        let x = mid.frame * Vec3::x();
        let y = mid.frame * Vec3::y();
        let observed = lateral.dot(&y).atan2(lateral.dot(&x));
        let mut residual = 0.0;
        for h in &self.history {
            let pred = mean_h + slope * (h.s - mean_s);
            residual += (h.heading - pred).norm_squared();
        }
        let rms = (residual / n as f64).sqrt();
        let confidence = (kappa * span / (kappa * span + 4.0 * rms)).clamp(0.0, 1.0);
        Some((wrap_angle(observed - mid.roll), confidence))
    }
}

/// Reference point at `s` along the plan, extended straight past its end.
pub fn reference_point(plan: &[Arc], s: f64) -> Vec3 {
    let total = path_length(plan);
    if s <= total {
        path_pose_at(plan, s).expect("non-empty plan").position
    } else {
        let end = plan.last().expect("non-empty plan").end();
        end.position + end.heading() * (s - total)
    }
}

/// Pure-pursuit demand toward `reference`: curvature and scene-frame bend
/// direction (zero when the reference is straight ahead).
pub fn pursuit(position: &Vec3, heading: &Vec3, reference: &Vec3) -> (f64, Vec3) {
    let d = reference - position;
    let along = d.dot(heading);
    let perp = d - heading * along;
    let dist2 = d.norm_squared();
    if perp.norm() < 1e-12 || dist2 < 1e-18 {
        return (0.0, Vec3::zeros());
    }
    (2.0 * perp.norm() / dist2, perp.normalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct DutyState {
    /// Seconds of fixed-bevel insertion left before the next revolution.
    hold_left: f64,
    /// Spin left in the current revolution (rad).
    spin_left: f64,
}

/// Demand, relative to the entry threshold, that ends straight following.
const STRAIGHT_EXIT_FACTOR: f64 = 2.0;

/// Stateful per-tick controller.
#[derive(Debug, Clone)]
pub struct Controller {
    pub params: ControlParams,
    pub kappa: f64,
    pub roll: RollEstimator,
    /// Smoothed measured-minus-planned tip position and its sample count.
    deviation: Option<(Vec3, u32)>,
    duty: DutyState,
    straight: bool,
}

impl Controller {
    pub fn new(params: ControlParams, kappa: f64, heading: &Vec3, initial_roll: f64) -> Self {
        Self {
            params,
            kappa,
            roll: RollEstimator::new(heading, initial_roll),
            deviation: None,
            duty: DutyState::default(),
            straight: false,
        }
    }

    /// Updates the roll estimator with a scene-frame measurement.
    pub fn observe(&mut self, meas: &TipMeasurement, inserted: f64) {
        self.roll.observe(&meas.heading, inserted, &self.params);
    }

    /// Forgets the smoothed deviation, e.g. when tissue moved between windows.
    pub fn reset_position_filter(&mut self) {
        self.deviation = None;
    }

    /// Smoothed offset of the measured tip from the plan point at the same
    /// inserted arclength.
    pub fn deviation(&self) -> Option<Vec3> {
        self.deviation.map(|(d, _)| d)
    }

    fn smooth_deviation(&mut self, raw: Vec3) -> Vec3 {
        let (d, n) = match self.deviation {
            Some((d, n)) => {
                let a = (1.0 / (n + 1) as f64).max(self.params.position_filter);
                (d * (1.0 - a) + raw * a, n + 1)
            }
            None => (raw, 1),
        };
        self.deviation = Some((d, n));
        d
    }

    /// Command for one tick. `inserted` is the commanded arclength so far and
    /// `segment_end` the arclength at which this segment stops.
    pub fn tick(
        &mut self,
        meas: &TipMeasurement,
        plan: &[Arc],
        inserted: f64,
        segment_end: f64,
        gate: &GateState,
        window_len: f64,
    ) -> ControlCommand {
        let p = self.params;
        // a step must end strictly inside the window
        let room = gate.window_remaining(window_len) - p.tick;
        if !gate.window_open || room <= WINDOW_EPS || inserted >= segment_end {
            return ControlCommand::idle();
        }
        let planned = reference_point(plan, inserted);
        let position = planned + self.smooth_deviation(meas.position - planned);
        let reference = reference_point(plan, inserted + p.lookahead);
        let (k_des, dir) = pursuit(&position, &meas.heading, &reference);
        let v = p.insert_speed.min((segment_end - inserted) / p.tick);

        // leaving straight mode costs a realignment, so it takes a larger demand
        let exit = if self.straight { STRAIGHT_EXIT_FACTOR } else { 1.0 };
        self.straight = k_des < exit * p.straight_fraction * self.kappa;
        if self.straight {
            return match p.straight_mode {
                StraightMode::ContinuousSpin => ControlCommand {
                    insert_v: v,
                    spin: p.spin_max,
                    mode: Mode::Inserting,
                },
                StraightMode::DutyCycle => self.duty_command(k_des, dir, v),
            };
        }
        self.duty = DutyState::default();
        let error = wrap_angle(self.roll.roll_of(&dir) - self.roll.estimate().roll);
        let spin = (error / p.tick).clamp(-p.spin_max, p.spin_max);
        if error.abs() > p.roll_gate {
            ControlCommand {
                insert_v: 0.0,
                spin,
                mode: Mode::SpinningToRoll,
            }
        } else {
            ControlCommand {
                insert_v: v,
                spin,
                mode: Mode::Inserting,
            }
        }
    }

    fn duty_command(&mut self, k_des: f64, dir: Vec3, v: f64) -> ControlCommand {
        let p = self.params;
        let dt = p.tick;
        if self.duty.spin_left > 0.0 {
            let w = (self.duty.spin_left / dt).min(p.spin_max);
            self.duty.spin_left -= w * dt;
            return ControlCommand {
                insert_v: v,
                spin: w,
                mode: Mode::Inserting,
            };
        }
        if self.duty.hold_left > 0.0 {
            self.duty.hold_left -= dt;
            let error = if k_des > 0.0 {
                wrap_angle(self.roll.roll_of(&dir) - self.roll.estimate().roll)
            } else {
                0.0
            };
            return ControlCommand {
                insert_v: v,
                spin: (error / dt).clamp(-p.spin_max, p.spin_max),
                mode: Mode::Inserting,
            };
        }
        // new cycle: one revolution, then fixed-bevel insertion sized so the
        // spinning share equals 1 - k_des / kappa
        let f = (1.0 - k_des / self.kappa).clamp(0.05, 1.0);
        let t_spin = std::f64::consts::TAU / p.spin_max;
        self.duty.spin_left = std::f64::consts::TAU;
        self.duty.hold_left = t_spin * (1.0 - f) / f;
        self.duty_command(k_des, dir, v)
    }

    /// Records a commanded spin in the roll estimate.
    pub fn applied(&mut self, cmd: &ControlCommand) {
        self.roll.spin(cmd.spin * self.params.tick);
    }
}

/// Paired trajectory error: distance from the measured tip to the plan point
/// at the same inserted arclength.
pub fn trajectory_error(plan: &[Arc], inserted: f64, measured: &Vec3) -> f64 {
    let s = inserted.min(path_length(plan));
    (path_pose_at(plan, s).expect("non-empty plan").position - measured).norm()
}

/// One control tick as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub mode: Mode,
    pub insert_v: f64,
    pub spin: f64,
    /// Measured tip in the tracker frame.
    pub meas: Vec3,
    /// True tip in the scene frame.
    pub truth: Vec3,
    pub window_open: bool,
    pub traj_err: f64,
    pub inserted: f64,
    pub true_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLog {
    pub index: usize,
    pub s_start: f64,
    pub s_end: f64,
    pub ticks: Vec<TickRecord>,
    /// Holds used to finish the segment.
    pub windows_used: u32,
    pub completed: bool,
}

pub fn write_segment_csv<W: Write>(writer: W, logs: &[SegmentLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t",
        "mode",
        "insert_v",
        "spin",
        "meas_x",
        "meas_y",
        "meas_z",
        "true_x",
        "true_y",
        "true_z",
        "window_open",
        "traj_err",
    ])
    .map_err(|e| Error::Io(e.to_string()))?;
    for log in logs {
        for r in &log.ticks {
            w.write_record([
                r.t.to_string(),
                r.mode.as_str().to_string(),
                r.insert_v.to_string(),
                r.spin.to_string(),
                r.meas.x.to_string(),
                r.meas.y.to_string(),
                r.meas.z.to_string(),
                r.truth.x.to_string(),
                r.truth.y.to_string(),
                r.truth.z.to_string(),
                r.window_open.to_string(),
                r.traj_err.to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
