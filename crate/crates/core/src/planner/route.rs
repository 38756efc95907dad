//! Stage 1: bronchoscope routing over the airway tree and piercing sites.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::anatomy::Scene;
use crate::geometry::{Pose, Vec3};

use super::PlannerConfig;

/// Route through the airways ending at a point on the wall of `edge`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BronchoscopeRoute {
    /// Airway nodes from the root to the proximal end of `edge`.
    pub nodes: Vec<usize>,
    pub edge: usize,
    /// Position along `edge` from its parent node, in `[0, 1]`.
    pub fraction: f64,
    pub cost: f64,
}

/// Candidate entry point into the parenchyma.
#[derive(Debug, Clone, PartialEq)]
pub struct PiercingSite {
    pub route: BronchoscopeRoute,
    /// Point on the airway wall.
    pub wall_point: Vec3,
    /// Outward wall normal.
    pub normal: Vec3,
    /// Needle start just outside the wall, aimed at the target.
    pub start: Pose,
    /// Route cost plus straight-line distance to the target.
    pub estimate: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn edge_cost(scene: &Scene, e: usize, config: &PlannerConfig) -> f64 {
    let c = scene.airways.edge_capsule(e);
    let penalty = if c.radius < config.scope_radius {
        config.narrow_branch_penalty
    } else {
        0.0
    };
    c.length() + penalty
}

/// Dijkstra from the airway root. Returns per-node cost and predecessor.
pub fn route_costs(scene: &Scene, config: &PlannerConfig) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = scene.airways.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![None; n];
    let Some(root) = scene.airways.root() else {
        return (dist, prev);
    };
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &[a, b]) in scene.airways.edges.iter().enumerate() {
        adj[a].push((b, e));
    }
    dist[root] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, root));
    while let Some(Entry(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(w, e) in &adj[v] {
            let nd = d + edge_cost(scene, e, config);
            if nd < dist[w] {
                dist[w] = nd;
                prev[w] = Some(v);
                heap.push(Entry(nd, w));
            }
        }
    }
    (dist, prev)
}

fn node_path(prev: &[Option<usize>], mut v: usize) -> Vec<usize> {
    let mut out = vec![v];
    while let Some(p) = prev[v] {
        out.push(p);
        v = p;
    }
    out.reverse();
    out
}

/// Enumerates piercing sites along sufficiently wide airways from which the
/// target lies inside the aiming cone, ordered by estimated cost.
pub fn piercing_sites(scene: &Scene, target: &Vec3, config: &PlannerConfig) -> Vec<PiercingSite> {
    let (dist, prev) = route_costs(scene, config);
    let offset = scene.clearance_min + config.start_offset;
    let mut out = Vec::new();
    for (e, &[a, _]) in scene.airways.edges.iter().enumerate() {
        let cap = scene.airways.edge_capsule(e);
        if cap.radius < config.min_pierce_radius || !dist[a].is_finite() {
            continue;
        }
        let (pa, pb) = (cap.a(), cap.b());
        let len = (pb - pa).norm();
        let axis = (pb - pa) / len;
        let n = (len / config.site_spacing).floor() as usize;
        for k in 1..n {
            let u = k as f64 / n as f64;
            let on_axis = pa + axis * (u * len);
            let to_target = target - on_axis;
            let perp = to_target - axis * axis.dot(&to_target);
            if perp.norm() < 1e-6 {
                continue;
            }
            let normal = perp.normalize();
            let start_p = on_axis + normal * (cap.radius + offset);
            let aim = target - start_p;
            let distance = aim.norm();
            if distance > config.max_needle_length || distance < 1e-6 {
                continue;
            }
            let heading = aim / distance;
            if heading.dot(&normal) < config.aim_cone.cos() {
                continue;
            }
            if scene.clearance(&start_p) < scene.clearance_min + config.check_margin {
                continue;
            }
            let route_cost = dist[a] + edge_cost(scene, e, config) - cap.length() + u * len;
            out.push(PiercingSite {
                route: BronchoscopeRoute {
                    nodes: node_path(&prev, a),
                    edge: e,
                    fraction: u,
                    cost: route_cost,
                },
                wall_point: on_axis + normal * cap.radius,
                normal,
                start: Pose::from_heading(start_p, &heading),
                estimate: route_cost + distance,
            });
        }
    }
    out.sort_by(|x, y| {
        x.estimate
            .total_cmp(&y.estimate)
            .then(x.route.edge.cmp(&y.route.edge))
            .then(x.route.fraction.total_cmp(&y.route.fraction))
    });
    out
}

/// Greedy pick of up to `max` sites, pairwise at least `min_sep` apart.
pub fn diverse_sites(sites: Vec<PiercingSite>, max: usize, min_sep: f64) -> Vec<PiercingSite> {
    let mut chosen: Vec<PiercingSite> = Vec::new();
    for s in sites {
        if chosen.len() >= max {
            break;
        }
        if chosen.iter().all(|c| (c.wall_point - s.wall_point).norm() >= min_sep) {
            chosen.push(s);
        }
    }
    chosen
}
