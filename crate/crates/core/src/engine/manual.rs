//! Straight-needle manual bronchoscopy baseline.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::anatomy::Scene;
use crate::error::{Error, Result};
use crate::geometry::{rotation_between, Pose, Vec3};
use crate::needle::{sense, NeedleState};
use crate::registration::RigidTransform;

use super::config::SimConfig;
use super::deployment::{perpendicular_at, Deployment};
use super::record::{AdverseEvent, DeploymentKind, DeploymentRecord, Outcome, Seeds, TimedPoint, TrackedSample};

/// Sampling step along the straight insertion (mm).
const MANUAL_STEP: f64 = 0.1;
/// Gap left between the airway wall and the needle tip before insertion.
const WALL_GAP: f64 = 0.5;
/// Spacing of candidate sites along an airway (mm).
const SITE_SPACING: f64 = 1.0;
const MANUAL_SPEED: f64 = 2.0;

/// Physician-style piercing site: the point just outside the wall of an
/// airway the bronchoscope reaches that is closest to the target, with the
/// direction from it to the target.
pub fn manual_site(scene: &Scene, target: &Vec3, reach_radius: f64) -> Result<(Vec3, Vec3)> {
    let mut best: Option<(f64, Vec3, Vec3)> = None;
    for e in 0..scene.airways.edges.len() {
        let cap = scene.airways.edge_capsule(e);
        if cap.radius < reach_radius {
            continue;
        }
        let (a, b) = (cap.a(), cap.b());
        let n = ((b - a).norm() / SITE_SPACING).ceil().max(1.0) as usize;
        for k in 0..=n {
            let q = a + (b - a) * (k as f64 / n as f64);
            let to = target - q;
            let dist = to.norm();
            if dist <= cap.radius + WALL_GAP {
                continue;
            }
            let u = to / dist;
            let start = q + u * (cap.radius + WALL_GAP);
            if scene.clearance(&start) < 0.5 * WALL_GAP {
                continue;
            }
            let d = (target - start).norm();
            if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                best = Some((d, start, u));
            }
        }
    }
    best.map(|(_, s, u)| (s, u)).ok_or_else(|| {
        Error::Precondition(format!(
            "no piercing site on an airway with radius >= {reach_radius} mm"
        ))
    })
}

/// Straight insertion along a noisy aim with lateral drift and no feedback.
/// Stops at the closest approach to the target along the aim, at
/// `max_insert`, or just before obstacle contact.
pub fn run_manual_baseline(scene: &Scene, target: Vec3, config: &SimConfig, seeds: Seeds) -> Result<DeploymentRecord> {
    let mut d = Deployment::new(scene, target, config, seeds)?;
    let m = config.manual;
    // with no clear site in reach, the scope is pushed into narrower airways
    let (start, toward) = manual_site(scene, &target, m.reach_radius).or_else(|_| manual_site(scene, &target, 0.0))?;

    let rng = &mut d.rng_sense;
    let tilt = Normal::new(0.0, m.aim_noise).expect("finite std");
    let (ax, ay) = (tilt.sample(rng), tilt.sample(rng));
    let u = perpendicular_at(&toward, 0.0);
    let v = toward.cross(&u);
    let aim = (toward + u * ax.tan() + v * ay.tan()).normalize();
    let drift_dir = perpendicular_at(&aim, rng.random_range(0.0..std::f64::consts::TAU));
    let travel = (aim + drift_dir * m.drift).normalize();

    let along = (target - start).dot(&aim).max(0.0);
    let planned_depth = along.min(m.max_insert);
    // the needle shaft moves along `travel`; depth is measured along it
    let depth_limit = planned_depth / aim.dot(&travel);

    let mut depth = 0.0;
    let mut contact = None;
    let n = (depth_limit / MANUAL_STEP).ceil() as usize;
    for k in 1..=n {
        let s = depth_limit * k as f64 / n as f64;
        let p = start + travel * s;
        let c = scene.clearance(&p);
        if c <= 0.0 {
            contact = Some((s, p, c));
            break;
        }
        depth = s;
    }

    let tip = Pose::new(start + travel * depth, rotation_between(&Vec3::z(), &travel));
    d.needle = NeedleState {
        tip,
        inserted: depth,
        roll: 0.0,
    };
    let samples = (depth.floor() as usize).max(1);
    let to_em = d.truth.em_to_ct_true.inverse();
    for k in 0..=samples {
        let s = depth * k as f64 / samples as f64;
        let p = start + travel * s;
        let t = s / MANUAL_SPEED;
        d.min_clearance = d.min_clearance.min(scene.clearance(&p));
        let physical = Pose::from_heading(
            to_em.apply(&d.truth.deformation.apply(&p)),
            &to_em.apply_vector(&travel),
        );
        let reading = sense(
            &physical,
            &RigidTransform::identity(),
            &config.noise,
            t,
            &mut d.rng_sense,
        );
        d.tracked.push(TrackedSample {
            t,
            position: reading.position,
            inserted: s,
            window_open: true,
        });
        d.true_tip.push(TimedPoint { t, position: p });
    }
    if let Some((s, p, c)) = contact {
        d.adverse.push(AdverseEvent {
            t: s / MANUAL_SPEED,
            kind: "obstacle_contact".into(),
            position: p,
            clearance: c,
        });
    }
    d.selected = Some(0);
    d.outcome = Some(Outcome::Completed);
    d.stage = super::deployment::Stage::Done;
    let mut rec = d.record();
    rec.kind = DeploymentKind::Manual;
    rec.selected_plan = None;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_free_tilt_is_unit() {
        let toward = Vec3::new(0.0, 0.6, 0.8);
        let u = perpendicular_at(&toward, 0.3);
        assert!(u.dot(&toward).abs() < 1e-12);
        assert!((u.norm() - 1.0).abs() < 1e-12);
    }
}
