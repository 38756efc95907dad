//! Breathing waveform, chest marker, tissue motion and the breath-hold gate.
//!
//! Breathing follows a raised cosine in a breathing clock that stops while a
//! hold is in progress, so a hold freezes the lung at peak tidal volume and
//! free breathing resumes from the same phase afterwards.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Free-breathing peaks required between two holds.
pub const MIN_CYCLES_BETWEEN_HOLDS: u32 = 2;
pub const DEFAULT_WINDOW_LEN: f64 = 10.0;

/// Spatially varying marker-to-tissue gain:
/// `gain(p) = base · (1 + gradient · (p − origin))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TissueCoupling {
    pub base: [f64; 3],
    pub gradient: [f64; 3],
    pub origin: [f64; 3],
}

impl TissueCoupling {
    pub fn constant(base: [f64; 3]) -> Self {
        Self {
            base,
            gradient: [0.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn gain(&self, p: &Vec3) -> Vec3 {
        let g = Vec3::from(self.gradient);
        let scale = 1.0 + g.dot(&(p - Vec3::from(self.origin)));
        Vec3::from(self.base) * scale
    }

    /// Lipschitz constant of `gain` per unit marker displacement.
    pub fn lipschitz(&self) -> f64 {
        Vec3::from(self.base).norm() * Vec3::from(self.gradient).norm()
    }
}

impl Default for TissueCoupling {
    fn default() -> Self {
        Self {
            base: [0.0, 0.15, 0.5],
            gradient: [0.0, 0.0, -0.003],
            origin: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "at", rename_all = "snake_case")]
pub enum VentilatorFault {
    #[default]
    None,
    /// Holds release after this many seconds regardless of the window.
    EarlyRelease(f64),
    IgnoreHoldRequests,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreathModel {
    pub period: f64,
    pub amplitude: f64,
    pub hold_drift_rate: f64,
    pub noise: f64,
    pub coupling: TissueCoupling,
    pub fault: VentilatorFault,
}

impl Default for BreathModel {
    fn default() -> Self {
        Self {
            period: 4.0,
            amplitude: 6.0,
            hold_drift_rate: 0.05,
            noise: 0.05,
            coupling: TissueCoupling::default(),
            fault: VentilatorFault::None,
        }
    }
}

impl BreathModel {
    /// Breath-hold-free lung: no marker motion at all.
    pub fn ex_vivo() -> Self {
        Self {
            amplitude: 0.0,
            hold_drift_rate: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config(format!("breath.period must be > 0, got {}", self.period)));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("hold_drift_rate", self.hold_drift_rate),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("breath.{name} must be >= 0, got {v}")));
            }
        }
        let c = &self.coupling;
        if c.base
            .iter()
            .chain(&c.gradient)
            .chain(&c.origin)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("breath.coupling gains must be finite".into()));
        }
        if let VentilatorFault::EarlyRelease(s) = self.fault {
            if !(s > 0.0) {
                return Err(Error::Config("early release time must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Noise-free free-breathing marker at breathing-clock value `tau`.
    pub fn waveform(&self, tau: f64) -> f64 {
        self.amplitude * (1.0 - (std::f64::consts::TAU * tau / self.period).cos()) / 2.0
    }

    /// Noise-free marker for a gate snapshot.
    pub fn marker_clean(&self, gate: &GateState) -> f64 {
        if gate.phase == Phase::Holding {
            self.waveform(gate.breath_clock) - self.hold_drift_rate * gate.hold_elapsed
        } else {
            self.waveform(gate.breath_clock)
        }
    }

    fn hold_limit(&self, window_len: f64) -> f64 {
        match self.fault {
            VentilatorFault::EarlyRelease(s) => s.min(window_len),
            _ => window_len,
        }
    }
}

/// Marker reading with sensor noise.
pub fn marker_displacement<R: Rng + ?Sized>(model: &BreathModel, gate: &GateState, rng: &mut R) -> f64 {
    let n = Normal::new(0.0, model.noise.max(0.0)).expect("finite noise");
    model.marker_clean(gate) + n.sample(rng)
}

/// Tissue displacement at `p` for a marker displacement `marker_disp`.
pub fn tissue_displacement(model: &BreathModel, p: &Vec3, marker_disp: f64) -> Vec3 {
    model.coupling.gain(p) * marker_disp
}

/// Tissue displacement relative to the CT state, which is taken at peak
/// tidal volume.
pub fn tissue_offset(model: &BreathModel, gate: &GateState, p: &Vec3) -> Vec3 {
    tissue_displacement(model, p, model.marker_clean(gate) - model.amplitude)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inhaling,
    Exhaling,
    AtPeak,
    Holding,
    PostHoldCooldown,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Inhaling => "inhaling",
            Phase::Exhaling => "exhaling",
            Phase::AtPeak => "at_peak",
            Phase::Holding => "holding",
            Phase::PostHoldCooldown => "post_hold_cooldown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub phase: Phase,
    pub window_open: bool,
    pub hold_elapsed: f64,
    pub cycles_since_hold: u32,
    /// Wall-clock time of this snapshot.
    pub t: f64,
    /// Breathing clock; advances only during free breathing.
    pub breath_clock: f64,
    pub hold_pending: bool,
    pub hold_start: Option<f64>,
    pub holds_completed: u32,
}

impl GateState {
    pub fn new() -> Self {
        Self {
            phase: Phase::Inhaling,
            window_open: false,
            hold_elapsed: 0.0,
            cycles_since_hold: MIN_CYCLES_BETWEEN_HOLDS,
            t: 0.0,
            breath_clock: 0.0,
            hold_pending: false,
            hold_start: None,
            holds_completed: 0,
        }
    }

    fn free_phase(&self, period: f64) -> Phase {
        if self.cycles_since_hold < MIN_CYCLES_BETWEEN_HOLDS {
            return Phase::PostHoldCooldown;
        }
        let frac = self.breath_clock.rem_euclid(period);
        if frac == period / 2.0 {
            Phase::AtPeak
        } else if frac < period / 2.0 {
            Phase::Inhaling
        } else {
            Phase::Exhaling
        }
    }

    /// Seconds of the current window left before the nominal release.
    pub fn window_remaining(&self, window_len: f64) -> f64 {
        if self.window_open {
            (window_len - self.hold_elapsed).max(0.0)
        } else {
            0.0
        }
    }
}

impl Default for GateState {
    fn default() -> Self {
        Self::new()
    }
}

/// Advances the gate to time `t`.
///
/// A request is latched until a hold begins. Holds begin exactly at the
/// analytic peak of the breathing clock and only after the required number of
/// free-breathing peaks since the last hold.
pub fn gate_update(gate: &GateState, model: &BreathModel, t: f64, hold_requested: bool, window_len: f64) -> GateState {
    assert!(window_len > 0.0, "window_len must be > 0");
    let mut g = *gate;
    if hold_requested && model.fault != VentilatorFault::IgnoreHoldRequests {
        g.hold_pending = true;
    }
    if t <= g.t {
        return g;
    }
    let p = model.period;
    let limit = model.hold_limit(window_len);
    let mut now = g.t;
    // event loop over hold releases and peak crossings inside (now, t]
    loop {
        if g.phase == Phase::Holding {
            let release_at = g.hold_start.unwrap_or(now) + limit;
            if release_at <= t {
                g.hold_elapsed = limit;
                now = release_at;
                g.phase = Phase::PostHoldCooldown;
                g.window_open = false;
                g.hold_elapsed = 0.0;
                g.hold_start = None;
                g.holds_completed += 1;
                continue;
            }
            g.hold_elapsed = t - g.hold_start.unwrap_or(now);
            break;
        }
        // next peak strictly after the current clock value
        let k = ((g.breath_clock - p / 2.0) / p).floor() + 1.0;
        let mut next_peak = p / 2.0 + k * p;
        if next_peak <= g.breath_clock {
            // clock sits on a peak that rounded below its own index
            next_peak += p;
        }
        let peak_time = now + (next_peak - g.breath_clock);
        if peak_time > t {
            g.breath_clock += t - now;
            break;
        }
        now = peak_time;
        g.breath_clock = next_peak;
        g.cycles_since_hold = g.cycles_since_hold.saturating_add(1);
        if g.hold_pending && g.cycles_since_hold >= MIN_CYCLES_BETWEEN_HOLDS {
            g.phase = Phase::Holding;
            g.window_open = true;
            g.hold_pending = false;
            g.hold_start = Some(now);
            g.hold_elapsed = 0.0;
            g.cycles_since_hold = 0;
        }
    }
    g.t = t;
    if g.phase != Phase::Holding {
        g.phase = g.free_phase(p);
    }
    g
}

/// One row of a gate/marker trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub t: f64,
    pub marker_mm: f64,
    pub phase: Phase,
    pub window_open: bool,
}

pub fn write_trace_csv<W: Write>(writer: W, rows: &[GateSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "marker_mm", "phase", "window_open"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.marker_mm.to_string(),
            r.phase.as_str().to_string(),
            r.window_open.to_string(),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
