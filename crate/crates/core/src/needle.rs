//! Bevel-tip needle kinematics with process noise and the 5-DOF tip sensor.

use nalgebra::{Unit, UnitQuaternion};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{any_perpendicular, propagate_arc, wrap_angle, Pose, Vec3};
use crate::registration::RigidTransform;

/// Largest roll change integrated in one sub-step while spinning and
/// inserting at the same time.
pub const MAX_ROLL_SUBSTEP: f64 = 0.05;

pub const DEFAULT_INSERT_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleState {
    pub tip: Pose,
    pub inserted: f64,
    /// Bevel angle in the tip frame; 0 bends toward local +x.
    pub roll: f64,
}

impl NeedleState {
    pub fn new(tip: Pose, roll: f64) -> Self {
        Self {
            tip,
            inserted: 0.0,
            roll: wrap_angle(roll),
        }
    }
}

/// Roll-less 5-DOF reading in the tracker frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipMeasurement {
    pub position: Vec3,
    pub heading: Vec3,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Relative std of the realized curvature per step.
    pub curvature_noise: f64,
    /// Heading diffusion, rad per sqrt(mm).
    pub heading_random_walk: f64,
    pub em_position_noise: f64,
    pub em_heading_noise: f64,
    /// Std of the unknown bevel roll at the start of autonomous steering.
    pub roll_offset_std: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            curvature_noise: 0.0,
            heading_random_walk: 0.0,
            em_position_noise: 0.0,
            em_heading_noise: 0.0,
            roll_offset_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("curvature_noise", self.curvature_noise),
            ("heading_random_walk", self.heading_random_walk),
            ("em_position_noise", self.em_position_noise),
            ("em_heading_noise", self.em_heading_noise),
            ("roll_offset_std", self.roll_offset_std),
        ];
        for (name, v) in vals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("noise.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            curvature_noise: 0.08,
            heading_random_walk: 0.004,
            em_position_noise: 0.5,
            em_heading_noise: 0.005,
            roll_offset_std: 0.35,
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std.max(0.0)).expect("finite std")
}

/// Rotates `dir` by a Gaussian angle about a uniformly random axis
/// perpendicular to it.
fn jitter_direction<R: Rng + ?Sized>(dir: &Vec3, std: f64, rng: &mut R) -> UnitQuaternion<f64> {
    let angle = normal(std).sample(rng);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let u = any_perpendicular(dir);
    let v = dir.cross(&u);
    let axis = Unit::new_normalize(u * phi.cos() + v * phi.sin());
    UnitQuaternion::from_axis_angle(&axis, angle)
}

/// Advances the needle by one command interval.
///
/// The random draws per call are fixed in number so that streams stay
/// aligned whatever the noise levels are.
pub fn step<R: Rng + ?Sized>(
    state: &NeedleState,
    insert_v: f64,
    spin: f64,
    dt: f64,
    kappa: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<NeedleState> {
    if insert_v < 0.0 || !insert_v.is_finite() {
        return Err(Error::Precondition(format!(
            "insertion speed must be >= 0 (no retraction), got {insert_v}"
        )));
    }
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Precondition(format!("dt must be > 0, got {dt}")));
    }
    let eps = normal(noise.curvature_noise).sample(rng);
    let walk_std = noise.heading_random_walk * (insert_v * dt).sqrt();
    let walk = jitter_direction(&state.tip.heading(), walk_std, rng);

    let s = insert_v * dt;
    let d_roll = spin * dt;
    let mut out = *state;
    if s > 0.0 {
        let k = (kappa * (1.0 + eps)).max(0.0);
        let n = ((d_roll.abs() / MAX_ROLL_SUBSTEP).ceil() as usize).max(1);
        let h = s / n as f64;
        let dr = d_roll / n as f64;
        let mut roll = state.roll;
        let mut tip = state.tip;
        for _ in 0..n {
            tip = propagate_arc(&tip, k, roll + 0.5 * dr, h);
            roll += dr;
        }
        tip.orientation = walk * tip.orientation;
        tip.orientation.renormalize();
        out.tip = tip;
        out.inserted += s;
    }
    out.roll = wrap_angle(state.roll + d_roll);
    Ok(out)
}

/// Tracker reading of `tip`. `em_to_scene` maps tracker coordinates to the
/// scene; the reading is expressed through its inverse.
pub fn sense<R: Rng + ?Sized>(
    tip: &Pose,
    em_to_scene: &RigidTransform,
    noise: &NoiseConfig,
    timestamp: f64,
    rng: &mut R,
) -> TipMeasurement {
    let inv = em_to_scene.inverse();
    let pn = normal(noise.em_position_noise);
    let jitter = Vec3::new(pn.sample(rng), pn.sample(rng), pn.sample(rng));
    let heading = inv.apply_vector(&tip.heading());
    let rot = jitter_direction(&heading, noise.em_heading_noise, rng);
    TipMeasurement {
        position: inv.apply(&tip.position) + jitter,
        heading: (rot * heading).normalize(),
        timestamp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn straight_step_advances_one_mm() {
        let s = NeedleState::new(Pose::identity(), 0.0);
        let n = step(&s, 1.0, 0.0, 1.0, 0.0, &NoiseConfig::zero(), &mut rng()).unwrap();
        assert!((n.tip.position - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert_eq!(n.inserted, 1.0);
    }

    #[test]
    fn spin_in_place() {
        let s = NeedleState::new(Pose::identity(), 0.0);
        let noise = NoiseConfig {
            em_position_noise: 0.0,
            ..NoiseConfig::default()
        };
        let n = step(&s, 0.0, PI, 1.0, 0.02, &noise, &mut rng()).unwrap();
        assert_eq!(n.tip.position, s.tip.position);
        assert!((n.roll - PI).abs() < 1e-12);
        assert_eq!(n.inserted, 0.0);
    }

    #[test]
    fn retraction_rejected() {
        let s = NeedleState::new(Pose::identity(), 0.0);
        assert!(matches!(
            step(&s, -1.0, 0.0, 0.1, 0.02, &NoiseConfig::zero(), &mut rng()),
            Err(Error::Precondition(_))
        ));
        assert!(step(&s, 1.0, 0.0, 0.0, 0.02, &NoiseConfig::zero(), &mut rng()).is_err());
    }

    #[test]
    fn stepping_matches_quarter_circle() {
        let total = PI * 50.0 / 2.0;
        let v: f64 = 2.0;
        let dt = 0.01;
        let mut s = NeedleState::new(Pose::identity(), 0.0);
        let mut r = rng();
        let mut remaining = total;
        while remaining > 1e-12 {
            let h = (v * dt).min(remaining);
            s = step(&s, v, 0.0, h / v, 0.02, &NoiseConfig::zero(), &mut r).unwrap();
            remaining -= h;
        }
        let exact = propagate_arc(&Pose::identity(), 0.02, 0.0, total);
        assert!((s.tip.position - exact.position).norm() < 1e-6);
        assert!((s.tip.position - Vec3::new(50.0, 0.0, 50.0)).norm() < 1e-6);
    }

    fn duty_cycled_curvature(duty: f64) -> f64 {
        let (v, period, dt) = (2.0, 1.0, 0.01);
        let spin = if duty > 0.0 {
            std::f64::consts::TAU / (duty * period)
        } else {
            0.0
        };
        let mut s = NeedleState::new(Pose::identity(), 0.0);
        let mut r = rng();
        let steps_per_period = (period / dt).round() as usize;
        for _ in 0..20 {
            for i in 0..steps_per_period {
                let spinning = (i as f64 + 0.5) * dt < duty * period;
                let w = if spinning { spin } else { 0.0 };
                s = step(&s, v, w, dt, 0.02, &NoiseConfig::zero(), &mut r).unwrap();
            }
        }
        let turned = s.tip.heading().angle(&Vec3::z());
        turned / s.inserted
    }

    #[test]
    fn duty_cycling_modulates_curvature() {
        let c0 = duty_cycled_curvature(0.0);
        let c5 = duty_cycled_curvature(0.5);
        let c1 = duty_cycled_curvature(1.0);
        assert!((c0 - 0.02).abs() < 1e-9);
        assert!(c5 > 0.0 && c5 < 0.02);
        assert!(c1 < c5);
        assert!(c1 < 1e-3, "continuous spin curvature {c1}");
    }

    #[test]
    fn sense_frame_bookkeeping() {
        let tip = Pose::from_translation(Vec3::new(3.0, 4.0, 5.0));
        let id = RigidTransform::identity();
        let m = sense(&tip, &id, &NoiseConfig::zero(), 0.0, &mut rng());
        assert!((m.position - tip.position).norm() < 1e-15);
        assert!((m.heading - tip.heading()).norm() < 1e-15);

        let reg = RigidTransform::new(nalgebra::Rotation3::identity(), Vec3::new(10.0, 0.0, 0.0));
        let m = sense(&tip, &reg, &NoiseConfig::zero(), 0.0, &mut rng());
        assert!((m.position - Vec3::new(-7.0, 4.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn sensor_noise_std() {
        let tip = Pose::identity();
        let mut noise = NoiseConfig::zero();
        noise.em_position_noise = 0.5;
        let mut r = rng();
        let xs: Vec<f64> = (0..10_000)
            .map(|_| sense(&tip, &RigidTransform::identity(), &noise, 0.0, &mut r).position.x)
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.025, "std {}", var.sqrt());
    }
}
