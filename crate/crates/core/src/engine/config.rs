//! Layered simulation configuration and named noise profiles.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control::ControlParams;
use crate::error::{Error, Result};
use crate::needle::NoiseConfig;
use crate::planner::PlannerConfig;
use crate::planner::DEFAULT_SEGMENT_LEN;
use crate::registration::RegistrationSimConfig;
use crate::respiration::{BreathModel, DEFAULT_WINDOW_LEN};

/// Which candidate the scripted physician picks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum PlanChoice {
    #[default]
    LowestCost,
    Index(usize),
}

/// Human-in-the-loop execution noise and executor limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Lateral std of the achieved needle start position (mm).
    pub pierce_position_noise: f64,
    /// Angular std of the achieved needle start heading (rad).
    pub pierce_heading_noise: f64,
    /// Relative std of the executed aiming correction.
    pub aim_gain_noise: f64,
    /// Additive angular std of each aiming correction (rad).
    pub aim_angle_noise: f64,
    pub max_aim_attempts: usize,
    /// Stationary readings averaged for alignment checks and replanning.
    pub align_samples: usize,
    pub window_len: f64,
    pub segment_len: f64,
    /// Longest wait for a window before giving up (s).
    pub max_gate_wait: f64,
    /// Windows one segment may use before the deployment is abandoned.
    pub max_segment_windows: u32,
    pub plan_choice: PlanChoice,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            pierce_position_noise: 0.5,
            pierce_heading_noise: 3f64.to_radians(),
            aim_gain_noise: 0.1,
            aim_angle_noise: 0.3f64.to_radians(),
            max_aim_attempts: 10,
            align_samples: 20,
            window_len: DEFAULT_WINDOW_LEN,
            segment_len: DEFAULT_SEGMENT_LEN,
            max_gate_wait: 60.0,
            max_segment_windows: 4,
            plan_choice: PlanChoice::LowestCost,
        }
    }
}

impl ExecutionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pierce_position_noise", self.pierce_position_noise),
            ("pierce_heading_noise", self.pierce_heading_noise),
            ("aim_gain_noise", self.aim_gain_noise),
            ("aim_angle_noise", self.aim_angle_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("execution.{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("window_len", self.window_len),
            ("segment_len", self.segment_len),
            ("max_gate_wait", self.max_gate_wait),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("execution.{name} must be > 0, got {v}")));
            }
        }
        if self.max_aim_attempts == 0 || self.align_samples == 0 || self.max_segment_windows == 0 {
            return Err(Error::Config(
                "execution attempt, sample and window counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Straight-needle manual bronchoscopy baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManualConfig {
    /// Angular std of the aim about the direction to the target (rad).
    pub aim_noise: f64,
    /// Lateral deviation per mm inserted.
    pub drift: f64,
    pub max_insert: f64,
    /// Narrowest airway the clinical bronchoscope reaches (mm radius).
    pub reach_radius: f64,
}

impl Default for ManualConfig {
    fn default() -> Self {
        Self {
            aim_noise: 5f64.to_radians(),
            drift: 0.08,
            max_insert: 45.0,
            reach_radius: 5.0,
        }
    }
}

impl ManualConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("aim_noise", self.aim_noise),
            ("drift", self.drift),
            ("reach_radius", self.reach_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("manual.{name} must be >= 0, got {v}")));
            }
        }
        if !(self.max_insert > 0.0) {
            return Err(Error::Config("manual.max_insert must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub profile: String,
    pub noise: NoiseConfig,
    pub breath: BreathModel,
    pub registration: RegistrationSimConfig,
    pub planner: PlannerConfig,
    pub control: ControlParams,
    pub execution: ExecutionConfig,
    pub manual: ManualConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::in_vivo()
    }
}

/// Curvature headroom left to the controller when planning for execution.
pub const DEPLOY_KAPPA_FRACTION: f64 = 0.75;

/// Tracker position noise of the in vivo profile (mm std per axis).
pub const IN_VIVO_EM_NOISE: f64 = 1.0;

pub const PROFILES: [&str; 3] = ["in_vivo", "ex_vivo", "noiseless"];

impl SimConfig {
    pub fn in_vivo() -> Self {
        Self {
            profile: "in_vivo".into(),
            noise: NoiseConfig {
                em_position_noise: IN_VIVO_EM_NOISE,
                ..NoiseConfig::default()
            },
            breath: BreathModel::default(),
            registration: RegistrationSimConfig::default(),
            planner: PlannerConfig {
                kappa_fraction: DEPLOY_KAPPA_FRACTION,
                ..PlannerConfig::default()
            },
            control: ControlParams::default(),
            execution: ExecutionConfig::default(),
            manual: ManualConfig::default(),
        }
    }

    /// In vivo noise on a lung without tidal motion.
    pub fn ex_vivo() -> Self {
        Self {
            profile: "ex_vivo".into(),
            breath: BreathModel::ex_vivo(),
            ..Self::in_vivo()
        }
    }

    /// Every noise source, deformation and respiration amplitude set to zero.
    pub fn noiseless() -> Self {
        let base = Self::in_vivo();
        Self {
            profile: "noiseless".into(),
            noise: NoiseConfig::zero(),
            breath: BreathModel::ex_vivo(),
            registration: RegistrationSimConfig {
                cloud_noise: 0.0,
                fiducial_noise: 0.0,
                deformation: 0.0,
                ..base.registration
            },
            execution: ExecutionConfig {
                pierce_position_noise: 0.0,
                pierce_heading_noise: 0.0,
                aim_gain_noise: 0.0,
                aim_angle_noise: 0.0,
                ..base.execution
            },
            manual: ManualConfig {
                aim_noise: 0.0,
                drift: 0.0,
                ..base.manual
            },
            ..base
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "in_vivo" | "default" => Ok(Self::in_vivo()),
            "ex_vivo" => Ok(Self::ex_vivo()),
            "noiseless" => Ok(Self::noiseless()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected one of {}",
                PROFILES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.breath.validate()?;
        self.planner.validate()?;
        self.control.validate()?;
        self.execution.validate()?;
        self.manual.validate()?;
        let r = &self.registration;
        if !(r.cloud_spacing > 0.0) || r.cloud_noise < 0.0 || r.fiducial_noise < 0.0 || r.deformation < 0.0 {
            return Err(Error::Config("registration parameters out of range".into()));
        }
        let reach = self.execution.window_len * self.control.insert_speed;
        if self.execution.segment_len > reach {
            return Err(Error::Config(format!(
                "segment_len {} mm cannot be inserted in one {} s window at {} mm/s",
                self.execution.segment_len, self.execution.window_len, self.control.insert_speed
            )));
        }
        Ok(())
    }

    /// Applies a `dotted.path=value` override. The path must name an existing
    /// field; the value is read as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        let updated: SimConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: SimConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
