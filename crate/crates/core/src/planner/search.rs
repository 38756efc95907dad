//! Curvature-bounded sampling-based search for the needle path in the
//! parenchyma.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anatomy::Scene;
use crate::error::{Error, Result};
use crate::geometry::{Arc, Pose, Vec3};

use super::PlannerConfig;

/// Checks an arc against all obstacles by sphere tracing along it.
///
/// Every sample must keep `clearance_min + margin`; consecutive samples are
/// at most `max(resolution, c - clearance_min)` apart, so by the 1-Lipschitz
/// property of the clearance field every point of the arc keeps
/// `clearance_min`.
pub fn arc_is_clear(scene: &Scene, arc: &Arc, margin: f64, resolution: f64) -> bool {
    min_arc_clearance(scene, arc, margin, resolution).is_some()
}

/// Smallest sampled clearance along the arc, or `None` on a violation.
pub fn min_arc_clearance(scene: &Scene, arc: &Arc, margin: f64, resolution: f64) -> Option<f64> {
    let delta = scene.clearance_min;
    let mut s = 0.0;
    let mut lowest = f64::INFINITY;
    loop {
        let c = scene.clearance(&arc.pose_at(s).position);
        if c < delta + margin {
            return None;
        }
        lowest = lowest.min(c);
        if s >= arc.arclength {
            return Some(lowest);
        }
        s = (s + resolution.max(c - delta)).min(arc.arclength);
    }
}

/// Single arc from `pose` through `target`, tangent to the current heading.
/// Returns `(curvature, roll, arclength)` when within the curvature cap.
pub fn connect_arc(pose: &Pose, target: &Vec3, kappa_max: f64) -> Option<(f64, f64, f64)> {
    let v = target - pose.position;
    let d = v.norm();
    if d < 1e-12 {
        return None;
    }
    let local = pose.orientation.inverse() * v;
    let lateral = (local.x * local.x + local.y * local.y).sqrt();
    let alpha = lateral.atan2(local.z);
    if alpha >= std::f64::consts::FRAC_PI_2 {
        return None;
    }
    if alpha < 1e-12 {
        return Some((0.0, 0.0, d));
    }
    let kappa = 2.0 * alpha.sin() / d;
    if kappa > kappa_max * (1.0 + 1e-12) {
        return None;
    }
    let kappa = kappa.min(kappa_max);
    let roll = local.y.atan2(local.x);
    Some((kappa, roll, 2.0 * alpha / kappa))
}

/// Splits one constant-curvature motion into chained arcs no longer than
/// `max_piece`.
pub fn chain_pieces(start: &Pose, kappa: f64, roll: f64, length: f64, max_piece: f64) -> Vec<Arc> {
    let n = (length / max_piece).ceil().max(1.0) as usize;
    let piece = length / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut pose = *start;
    for _ in 0..n {
        let arc = Arc::new(pose, kappa, roll, piece);
        pose = arc.end();
        out.push(arc);
    }
    out
}

struct Node {
    pose: Pose,
    parent: Option<usize>,
    arc: Option<Arc>,
    length: f64,
}

fn trace(nodes: &[Node], mut i: usize) -> Vec<Arc> {
    let mut out = Vec::new();
    while let Some(arc) = nodes[i].arc {
        out.push(arc);
        i = nodes[i].parent.expect("arc nodes have parents");
    }
    out.reverse();
    out
}

/// Tries to finish at the target from node `i`.
fn try_connect(scene: &Scene, nodes: &[Node], i: usize, target: &Vec3, config: &PlannerConfig) -> Option<Vec<Arc>> {
    let node = &nodes[i];
    let (k, roll, len) = connect_arc(&node.pose, target, scene.kappa_max * config.kappa_fraction)?;
    if node.length + len > config.max_needle_length {
        return None;
    }
    let pieces = chain_pieces(&node.pose, k, roll, len, config.max_extension);
    if !pieces
        .iter()
        .all(|a| arc_is_clear(scene, a, config.check_margin, config.check_resolution))
    {
        return None;
    }
    let mut path = trace(nodes, i);
    path.extend(pieces);
    Some(path)
}

/// Searches for a chain of arcs from `start` ending exactly at `target`.
///
/// Each sample grows the tree by one arc of length in
/// `[min_extension, max_extension]` with curvature at most the scene cap,
/// steered toward the sample or drawn at random; every new node attempts a
/// direct single-arc connection to the target.
pub fn plan_needle_path(
    start: &Pose,
    target: &Vec3,
    scene: &Scene,
    config: &PlannerConfig,
    rng_seed: u64,
    budget: usize,
) -> Result<Vec<Arc>> {
    let delta = scene.clearance_min;
    let c0 = scene.clearance(&start.position);
    if c0 < delta {
        return Err(Error::Precondition(format!(
            "start clearance {c0:.3} mm is below {delta} mm"
        )));
    }
    let kappa_cap = scene.kappa_max * config.kappa_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut nodes = vec![Node {
        pose: *start,
        parent: None,
        arc: None,
        length: 0.0,
    }];
    let mut best = (f64::INFINITY, c0);
    if let Some(p) = try_connect(scene, &nodes, 0, target, config) {
        return Ok(p);
    }

    let (lo, hi) = sampling_box(start, target, scene, config.sampling_padding);
    for _ in 0..budget {
        let q = if rng.random_bool(config.goal_bias) {
            *target
        } else {
            Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        };
        let length = rng.random_range(config.min_extension..=config.max_extension);
        let random_arc = rng.random_bool(config.random_extension);
        let k_rand: f64 = rng.random_range(0.0..=kappa_cap);
        let roll_rand: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);

        let Some(i) = nearest(&nodes, &q, length, config) else {
            continue;
        };
        let pose = nodes[i].pose;
        let (kappa, roll) = if random_arc {
            (k_rand, roll_rand)
        } else {
            steer(&pose, &q, kappa_cap)
        };
        let arc = Arc::new(pose, kappa, roll, length);
        if !arc_is_clear(scene, &arc, config.check_margin, config.check_resolution) {
            continue;
        }
        let end = arc.end();
        let d = (end.position - target).norm();
        if d < best.0 {
            best = (d, scene.clearance(&end.position));
        }
        nodes.push(Node {
            pose: end,
            parent: Some(i),
            arc: Some(arc),
            length: nodes[i].length + length,
        });
        if let Some(p) = try_connect(scene, &nodes, nodes.len() - 1, target, config) {
            return Ok(p);
        }
    }
    Err(Error::NoPlanFound {
        best_clearance: best.1,
        samples: budget,
    })
}

fn sampling_box(start: &Pose, target: &Vec3, scene: &Scene, pad: f64) -> (Vec3, Vec3) {
    let (plo, phi) = scene.pleura.bounds();
    let lo = start.position.inf(target).add_scalar(-pad).sup(&plo);
    let hi = start.position.sup(target).add_scalar(pad).inf(&phi);
    let hi = hi.zip_map(&lo, |h, l| if h > l { h } else { l + 1e-6 });
    (lo, hi)
}

/// Node minimizing distance plus a heading-misalignment penalty.
fn nearest(nodes: &[Node], q: &Vec3, ext: f64, config: &PlannerConfig) -> Option<usize> {
    let mut best = None;
    let mut best_score = f64::INFINITY;
    for (i, n) in nodes.iter().enumerate() {
        if n.length + ext > config.max_needle_length {
            continue;
        }
        let v = q - n.pose.position;
        let d = v.norm();
        let angle = if d > 1e-12 {
            n.pose.heading().dot(&(v / d)).clamp(-1.0, 1.0).acos()
        } else {
            0.0
        };
        let score = d + config.heading_weight * angle;
        if score < best_score {
            best_score = score;
            best = Some(i);
        }
    }
    best
}

/// Bend plane and curvature turning `pose` toward `q`.
fn steer(pose: &Pose, q: &Vec3, kappa_max: f64) -> (f64, f64) {
    let v = q - pose.position;
    let local = pose.orientation.inverse() * v;
    let lateral = (local.x * local.x + local.y * local.y).sqrt();
    if lateral < 1e-12 {
        return (0.0, 0.0);
    }
    let alpha = lateral.atan2(local.z);
    let kappa = if alpha < std::f64::consts::FRAC_PI_2 {
        (2.0 * alpha.sin() / v.norm()).min(kappa_max)
    } else {
        kappa_max
    };
    (kappa, local.y.atan2(local.x))
}
