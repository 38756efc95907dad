use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AirwayTree, Capsule, Ellipsoid, FiducialModel, Pleura, Scene, TargetRegion};
use crate::error::{Error, Result};
use crate::geometry::{any_perpendicular, Pose, Vec3};

/// Knobs for procedural scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub pleura_semi_axes: [f64; 3],
    /// Bifurcation generations below the trachea.
    pub tree_depth: usize,
    pub trachea_length: f64,
    pub trachea_radius: f64,
    pub length_ratio: f64,
    pub radius_ratio: f64,
    pub branch_angle_deg: f64,
    pub branch_angle_jitter_deg: f64,
    pub vessel_count: usize,
    pub vessel_radius: [f64; 2],
    pub vessel_length: [f64; 2],
    pub target_region_count: usize,
    pub target_region_size: f64,
    pub fiducial_count: usize,
    pub kappa_max: f64,
    pub clearance_min: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            pleura_semi_axes: [75.0, 60.0, 110.0],
            tree_depth: 5,
            trachea_length: 45.0,
            trachea_radius: 8.0,
            length_ratio: 0.78,
            radius_ratio: 0.78,
            branch_angle_deg: 36.0,
            branch_angle_jitter_deg: 8.0,
            vessel_count: 36,
            vessel_radius: [0.8, 2.2],
            vessel_length: [15.0, 45.0],
            target_region_count: 4,
            target_region_size: 20.0,
            fiducial_count: 3,
            kappa_max: 0.02,
            clearance_min: 1.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.tree_depth < 2 {
            return bad("tree_depth must be at least 2");
        }
        if self.pleura_semi_axes.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return bad("pleura semi-axes must be positive");
        }
        if self.trachea_length <= 0.0 || self.trachea_radius <= 0.0 {
            return bad("trachea dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.length_ratio) || !(0.0..=1.0).contains(&self.radius_ratio) {
            return bad("length_ratio and radius_ratio must lie in [0, 1]");
        }
        if self.vessel_radius[0] <= 0.0 || self.vessel_radius[0] > self.vessel_radius[1] {
            return bad("vessel_radius must be an increasing positive range");
        }
        if self.vessel_length[0] <= 0.0 || self.vessel_length[0] > self.vessel_length[1] {
            return bad("vessel_length must be an increasing positive range");
        }
        if self.target_region_size <= 0.0 {
            return bad("target_region_size must be positive");
        }
        if self.kappa_max <= 0.0 {
            return bad("kappa_max must be positive");
        }
        if self.clearance_min <= 0.0 {
            return bad("clearance_min must be positive");
        }
        let min_axis = self.pleura_semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.trachea_radius * 2.0 >= min_axis {
            return bad("trachea does not fit inside the pleura");
        }
        Ok(())
    }
}

/// Minimum margin between airway walls and the pleura.
const AIRWAY_PLEURA_MARGIN: f64 = 4.0;

struct TreeBuilder<'a> {
    tree: AirwayTree,
    pleura: &'a Ellipsoid,
    params: &'a SceneParams,
}

impl TreeBuilder<'_> {
    fn push_node(&mut self, p: Vec3, r: f64) -> usize {
        self.tree.nodes.push(p.into());
        self.tree.radii.push(r);
        self.tree.nodes.len() - 1
    }

    fn fits(&self, p: &Vec3, r: f64) -> bool {
        self.pleura.signed_distance_inside(p) >= r + AIRWAY_PLEURA_MARGIN
    }

    /// Adds a two-edge branch polyline from `from`; returns the end node.
    fn add_branch(&mut self, rng: &mut ChaCha8Rng, from: usize, dir: &Vec3, length: f64, radius: f64) -> Option<usize> {
        let start = self.tree.node(from);
        let mut len = length;
        while len >= 4.0 && !self.fits(&(start + dir * len), radius) {
            len *= 0.85;
        }
        if len < 4.0 {
            return None;
        }
        let jitter = any_perpendicular(dir) * rng.random_range(-1.0..1.0);
        let mid = start + dir * (0.5 * len) + jitter;
        if !self.fits(&mid, radius) {
            return None;
        }
        let m = self.push_node(mid, radius);
        self.tree.edges.push([from, m]);
        let e = self.push_node(start + dir * len, radius);
        self.tree.edges.push([m, e]);
        Some(e)
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        rng: &mut ChaCha8Rng,
        node: usize,
        dir: Vec3,
        plane_normal: Vec3,
        generation: usize,
        length: f64,
        radius: f64,
    ) {
        if generation > self.params.tree_depth {
            return;
        }
        // successive bifurcation planes are roughly orthogonal
        let twist = if generation == 1 {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2 + rng.random_range(-0.35..0.35)
        };
        let normal = UnitQuaternion::from_axis_angle(&Unit::new_normalize(dir), twist) * plane_normal;
        for side in [-1.0, 1.0] {
            let mut angle =
                self.params.branch_angle_deg + rng.random_range(-1.0..1.0) * self.params.branch_angle_jitter_deg;
            if generation == 1 {
                angle += 10.0;
            }
            let rot = UnitQuaternion::from_axis_angle(&Unit::new_normalize(normal), side * angle.to_radians());
            let child_dir = (rot * dir).normalize();
            let child_len = length * self.params.length_ratio * rng.random_range(0.9..1.1);
            let child_r = radius * self.params.radius_ratio;
            if let Some(end) = self.add_branch(rng, node, &child_dir, child_len, child_r) {
                let child_normal = (normal - child_dir * normal.dot(&child_dir)).normalize();
                self.grow(rng, end, child_dir, child_normal, generation + 1, child_len, child_r);
            }
        }
    }
}

/// Deterministic scene for `(seed, params)`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ax, ay, az] = params.pleura_semi_axes;
    let pleura = Ellipsoid::new(Vec3::zeros(), Vec3::new(ax, ay, az));

    let mut builder = TreeBuilder {
        tree: AirwayTree::default(),
        pleura: &pleura,
        params,
    };
    let top = Vec3::new(0.0, 0.0, az - params.trachea_radius - AIRWAY_PLEURA_MARGIN - 6.0);
    let root = builder.push_node(top, params.trachea_radius);
    let down = -Vec3::z();
    let carina = builder
        .add_branch(&mut rng, root, &down, params.trachea_length, params.trachea_radius)
        .ok_or_else(|| Error::Config("trachea does not fit inside the pleura".into()))?;
    let first_normal = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), rng.random_range(-0.2..0.2)) * Vec3::y();
    builder.grow(
        &mut rng,
        carina,
        down,
        first_normal,
        1,
        params.trachea_length,
        params.trachea_radius,
    );
    let airways = builder.tree;
    let airway_caps: Vec<Capsule> = (0..airways.edges.len()).map(|e| airways.edge_capsule(e)).collect();

    // vessels: free-floating capsules that do not touch the airways
    let mut vessels = Vec::new();
    let mut attempts = 0;
    while vessels.len() < params.vessel_count && attempts < params.vessel_count * 200 {
        attempts += 1;
        let c = sample_in_ellipsoid(&mut rng, &pleura, 0.85);
        let d = random_unit(&mut rng);
        let len = rng.random_range(params.vessel_length[0]..=params.vessel_length[1]);
        let r = rng.random_range(params.vessel_radius[0]..=params.vessel_radius[1]);
        let cap = Capsule::new(c - d * (0.5 * len), c + d * (0.5 * len), r);
        let inside = [cap.a(), cap.b()]
            .iter()
            .all(|p| pleura.signed_distance_inside(p) >= r + 2.0);
        if !inside {
            continue;
        }
        if airway_caps.iter().any(|a| a.distance_to(&cap) < 1.5) {
            continue;
        }
        vessels.push(cap);
    }

    // peripheral cuboidal target regions
    let mut target_regions = Vec::new();
    let half = 0.5 * params.target_region_size;
    let mut attempts = 0;
    while target_regions.len() < params.target_region_count && attempts < 5_000 {
        attempts += 1;
        let dir = random_unit(&mut rng);
        let scale = rng.random_range(0.55..0.72);
        // point on the pleura along `dir`, pulled inward
        let center = dir / pleura.level(&dir).sqrt() * scale;
        // keep away from the trachea region at the apex
        if center.z > az * 0.35 {
            continue;
        }
        let region = TargetRegion {
            min: (center - Vec3::repeat(half)).into(),
            max: (center + Vec3::repeat(half)).into(),
        };
        if region.corners().iter().any(|c| pleura.signed_distance_inside(c) < 3.0) {
            continue;
        }
        if target_regions
            .iter()
            .any(|r: &TargetRegion| (r.center() - region.center()).norm() < params.target_region_size)
        {
            continue;
        }
        target_regions.push(region);
    }

    // fiducials on the anterior chest wall, outside the pleura
    let fiducials = (0..params.fiducial_count)
        .map(|i| {
            let spread = i as f64 - 0.5 * (params.fiducial_count as f64 - 1.0);
            let pos = Vec3::new(
                ax * 0.45 * spread + rng.random_range(-5.0..5.0),
                -(ay + 25.0) + rng.random_range(-3.0..3.0),
                az * 0.2 * spread + rng.random_range(-10.0..10.0),
            );
            let orient = UnitQuaternion::from_euler_angles(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            FiducialModel {
                coil_pose: Pose::new(pos, orient),
                sphere_centers: FiducialModel::standard_geometry(),
            }
        })
        .collect();

    let scene = Scene::new(
        seed,
        Pleura::Ellipsoid(pleura),
        airways,
        vessels,
        target_regions,
        fiducials,
        params.kappa_max,
        params.clearance_min,
    );
    scene.validate()?;
    Ok(scene)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_in_ellipsoid(rng: &mut ChaCha8Rng, e: &Ellipsoid, scale: f64) -> Vec3 {
    loop {
        let u = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if u.norm_squared() <= 1.0 {
            return e.center()
                + Vec3::new(
                    u.x * e.semi_axes[0] * scale,
                    u.y * e.semi_axes[1] * scale,
                    u.z * e.semi_axes[2] * scale,
                );
        }
    }
}
