//! Synthetic lung scenes: airway tree, vessel obstacles, pleural boundary,
//! target regions and chest-wall fiducials, all in the CT frame (mm).

mod generate;
pub mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
pub use generate::{generate_scene, SceneParams};
pub use shapes::{Capsule, Ellipsoid, TriMesh};

pub const SCENE_VERSION: u32 = 1;

/// Consecutive rejected draws before a target region is declared infeasible.
pub const MAX_TARGET_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleClass {
    Vessel,
    AirwayWall,
    Pleura,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    /// Signed clearance in mm; negative inside an obstacle.
    pub distance: f64,
    pub class: ObstacleClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pleura {
    Ellipsoid(Ellipsoid),
    Mesh(TriMesh),
}

impl Pleura {
    pub fn signed_distance_inside(&self, p: &Vec3) -> f64 {
        match self {
            Pleura::Ellipsoid(e) => e.signed_distance_inside(p),
            Pleura::Mesh(m) => m.signed_distance_inside(p),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Pleura::Ellipsoid(e) => e.contains(p),
            Pleura::Mesh(m) => m.contains(p),
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Pleura::Ellipsoid(e) => {
                let r = Vec3::from(e.semi_axes);
                (e.center() - r, e.center() + r)
            }
            Pleura::Mesh(m) => m.bounds(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        match self {
            Pleura::Ellipsoid(e) => e.center(),
            Pleura::Mesh(m) => {
                let (lo, hi) = m.bounds();
                (lo + hi) * 0.5
            }
        }
    }
}

/// Airway skeleton: a rooted tree of straight edges. The capsule around edge
/// `[parent, child]` uses the child's radius.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AirwayTree {
    pub nodes: Vec<[f64; 3]>,
    pub radii: Vec<f64>,
    /// `[parent, child]` pairs.
    pub edges: Vec<[usize; 2]>,
}

impl AirwayTree {
    pub fn node(&self, i: usize) -> Vec3 {
        Vec3::from(self.nodes[i])
    }

    pub fn edge_capsule(&self, e: usize) -> Capsule {
        let [a, b] = self.edges[e];
        Capsule::new(self.node(a), self.node(b), self.radii[b])
    }

    pub fn segments(&self) -> Vec<(Vec3, Vec3)> {
        self.edges.iter().map(|&[a, b]| (self.node(a), self.node(b))).collect()
    }

    pub fn total_length(&self) -> f64 {
        self.segments().iter().map(|(a, b)| (b - a).norm()).sum()
    }

    pub fn parent_of(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.nodes.len()];
        for &[a, b] in &self.edges {
            parent[b] = Some(a);
        }
        parent
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for &[a, b] in &self.edges {
            ch[a].push(b);
        }
        ch
    }

    /// Index of the edge ending at each node.
    pub fn incoming_edge(&self) -> Vec<Option<usize>> {
        let mut inc = vec![None; self.nodes.len()];
        for (i, &[_, b]) in self.edges.iter().enumerate() {
            inc[b] = Some(i);
        }
        inc
    }

    pub fn root(&self) -> Option<usize> {
        let parent = self.parent_of();
        (0..self.nodes.len()).find(|&i| parent[i].is_none())
    }

    /// A single root, every other node with exactly one parent, all reachable.
    pub fn is_tree(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return self.edges.is_empty();
        }
        if self.edges.len() != n - 1 || self.radii.len() != n {
            return false;
        }
        let mut indeg = vec![0usize; n];
        for &[a, b] in &self.edges {
            if a >= n || b >= n || a == b {
                return false;
            }
            indeg[b] += 1;
        }
        if indeg.iter().filter(|&&d| d == 0).count() != 1 || indeg.iter().any(|&d| d > 1) {
            return false;
        }
        let root = indeg.iter().position(|&d| d == 0).unwrap();
        let children = self.children();
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                return false;
            }
            stack.extend(children[v].iter().copied());
        }
        seen.iter().all(|&s| s)
    }

    /// Branch polylines: maximal chains between the root, bifurcations and leaves.
    pub fn branches(&self) -> Vec<Vec<usize>> {
        let children = self.children();
        let Some(root) = self.root() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut starts = vec![root];
        while let Some(s) = starts.pop() {
            for &c in &children[s] {
                let mut chain = vec![s, c];
                let mut cur = c;
                while children[cur].len() == 1 {
                    cur = children[cur][0];
                    chain.push(cur);
                }
                if !children[cur].is_empty() {
                    starts.push(cur);
                }
                out.push(chain);
            }
        }
        out.sort();
        out
    }
}

/// Axis-aligned cuboidal region from which targets are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl TargetRegion {
    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    pub fn corners(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(8);
        for i in 0..8 {
            out.push(Vec3::new(
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ));
        }
        out
    }

    pub fn center(&self) -> Vec3 {
        (Vec3::from(self.min) + Vec3::from(self.max)) * 0.5
    }
}

/// Chest-wall marker with seven spheres at known offsets in its coil frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialModel {
    pub coil_pose: Pose,
    pub sphere_centers: Vec<[f64; 3]>,
}

pub const FIDUCIAL_SPHERES: usize = 7;

impl FiducialModel {
    /// The marker geometry shared by all generated fiducials.
    pub fn standard_geometry() -> Vec<[f64; 3]> {
        vec![
            [0.0, 0.0, 0.0],
            [18.0, 0.0, 0.0],
            [0.0, 14.0, 0.0],
            [0.0, 0.0, 10.0],
            [12.0, 10.0, 4.0],
            [-8.0, 6.0, 9.0],
            [6.0, -10.0, 7.0],
        ]
    }

    pub fn centers_in_scene(&self) -> Vec<Vec3> {
        self.sphere_centers
            .iter()
            .map(|c| self.coil_pose.transform_point(&Vec3::from(*c)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sphere_centers.len() != FIDUCIAL_SPHERES {
            return Err(Error::Config(format!(
                "fiducial has {} spheres, expected {FIDUCIAL_SPHERES}",
                self.sphere_centers.len()
            )));
        }
        for i in 0..FIDUCIAL_SPHERES {
            for j in (i + 1)..FIDUCIAL_SPHERES {
                let d = (Vec3::from(self.sphere_centers[i]) - Vec3::from(self.sphere_centers[j])).norm();
                if d < 2.0 {
                    return Err(Error::Config(format!(
                        "fiducial spheres {i} and {j} are only {d:.3} mm apart"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct IndexedCapsule {
    capsule: Capsule,
    class: ObstacleClass,
    center: Vec3,
    reach: f64,
}

/// On-disk form of a scene; field order is the canonical serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneDoc {
    version: u32,
    units: String,
    seed: u64,
    pleura: Pleura,
    airways: AirwayTree,
    vessels: Vec<Capsule>,
    target_regions: Vec<TargetRegion>,
    fiducials: Vec<FiducialModel>,
    kappa_max: f64,
    clearance_min: f64,
}

/// Immutable lung scene with a prebuilt obstacle index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SceneDoc", into = "SceneDoc")]
pub struct Scene {
    pub seed: u64,
    pub pleura: Pleura,
    pub airways: AirwayTree,
    pub vessels: Vec<Capsule>,
    pub target_regions: Vec<TargetRegion>,
    pub fiducials: Vec<FiducialModel>,
    pub kappa_max: f64,
    pub clearance_min: f64,
    index: Vec<IndexedCapsule>,
}

impl PartialEq for Scene {
    fn eq(&self, other: &Self) -> bool {
        SceneDoc::from(self.clone()) == SceneDoc::from(other.clone())
    }
}

impl From<Scene> for SceneDoc {
    fn from(s: Scene) -> Self {
        SceneDoc {
            version: SCENE_VERSION,
            units: "mm".into(),
            seed: s.seed,
            pleura: s.pleura,
            airways: s.airways,
            vessels: s.vessels,
            target_regions: s.target_regions,
            fiducials: s.fiducials,
            kappa_max: s.kappa_max,
            clearance_min: s.clearance_min,
        }
    }
}

impl TryFrom<SceneDoc> for Scene {
    type Error = Error;

    fn try_from(d: SceneDoc) -> Result<Self> {
        if d.version != SCENE_VERSION {
            return Err(Error::Parse(format!("unsupported scene version {}", d.version)));
        }
        if d.units != "mm" {
            return Err(Error::Parse(format!("unsupported units {:?}", d.units)));
        }
        Ok(Scene::new(
            d.seed,
            d.pleura,
            d.airways,
            d.vessels,
            d.target_regions,
            d.fiducials,
            d.kappa_max,
            d.clearance_min,
        ))
    }
}

impl Scene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        pleura: Pleura,
        airways: AirwayTree,
        vessels: Vec<Capsule>,
        target_regions: Vec<TargetRegion>,
        fiducials: Vec<FiducialModel>,
        kappa_max: f64,
        clearance_min: f64,
    ) -> Self {
        let mut scene = Scene {
            seed,
            pleura,
            airways,
            vessels,
            target_regions,
            fiducials,
            kappa_max,
            clearance_min,
            index: Vec::new(),
        };
        scene.rebuild_index();
        scene
    }

    fn rebuild_index(&mut self) {
        let mut index = Vec::new();
        let mut push = |capsule: Capsule, class| {
            let (a, b) = (capsule.a(), capsule.b());
            index.push(IndexedCapsule {
                capsule,
                class,
                center: (a + b) * 0.5,
                reach: 0.5 * (b - a).norm() + capsule.radius,
            });
        };
        for e in 0..self.airways.edges.len() {
            push(self.airways.edge_capsule(e), ObstacleClass::AirwayWall);
        }
        for v in &self.vessels {
            push(*v, ObstacleClass::Vessel);
        }
        self.index = index;
    }

    /// Checks every scene invariant.
    pub fn validate(&self) -> Result<()> {
        if self.clearance_min <= 0.0 {
            return Err(Error::Config("clearance_min must be positive".into()));
        }
        if self.kappa_max <= 0.0 {
            return Err(Error::Config("kappa_max must be positive".into()));
        }
        if !self.airways.is_tree() {
            return Err(Error::Config("airway skeleton is not a tree".into()));
        }
        for e in 0..self.airways.edges.len() {
            let c = self.airways.edge_capsule(e);
            for p in [c.a(), c.b()] {
                if self.pleura.signed_distance_inside(&p) <= c.radius {
                    return Err(Error::Config(format!("airway edge {e} leaves the pleura")));
                }
            }
        }
        for (i, v) in self.vessels.iter().enumerate() {
            for p in [v.a(), v.b()] {
                if self.pleura.signed_distance_inside(&p) <= v.radius {
                    return Err(Error::Config(format!("vessel {i} leaves the pleura")));
                }
            }
        }
        for (i, r) in self.target_regions.iter().enumerate() {
            if r.corners().iter().any(|c| !self.pleura.contains(c)) {
                return Err(Error::Config(format!("target region {i} leaves the pleura")));
            }
        }
        for f in &self.fiducials {
            f.validate()?;
        }
        Ok(())
    }

    /// Minimum signed clearance over vessels, airway walls and the pleura.
    pub fn distance_to_obstacles(&self, p: &Vec3) -> Clearance {
        let mut best = Clearance {
            distance: self.pleura.signed_distance_inside(p),
            class: ObstacleClass::Pleura,
        };
        for c in &self.index {
            // bounding-sphere lower bound
            if (p - c.center).norm() - c.reach >= best.distance {
                continue;
            }
            let d = c.capsule.signed_distance(p);
            if d < best.distance {
                best = Clearance {
                    distance: d,
                    class: c.class,
                };
            }
        }
        best
    }

    pub fn clearance(&self, p: &Vec3) -> f64 {
        self.distance_to_obstacles(p).distance
    }

    /// Uniform draw over the union of target regions, rejected until the
    /// clearance reaches `clearance_min`.
    pub fn sample_target(&self, rng_seed: u64) -> Result<Vec3> {
        if self.target_regions.is_empty() {
            return Err(Error::Precondition("scene has no target regions".into()));
        }
        let total: f64 = self.target_regions.iter().map(TargetRegion::volume).sum();
        if total <= 0.0 {
            return Err(Error::InfeasibleRegion { attempts: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for _ in 0..MAX_TARGET_REJECTIONS {
            let mut pick = rng.random_range(0.0..total);
            let mut region = &self.target_regions[self.target_regions.len() - 1];
            for r in &self.target_regions {
                if pick < r.volume() {
                    region = r;
                    break;
                }
                pick -= r.volume();
            }
            let p = Vec3::new(
                rng.random_range(region.min[0]..=region.max[0]),
                rng.random_range(region.min[1]..=region.max[1]),
                rng.random_range(region.min[2]..=region.max[2]),
            );
            if self.clearance(&p) >= self.clearance_min {
                return Ok(p);
            }
        }
        Err(Error::InfeasibleRegion {
            attempts: MAX_TARGET_REJECTIONS,
        })
    }

    /// Points along every airway branch at most `spacing` apart, branch
    /// endpoints included. Shared bifurcation points appear once.
    pub fn airway_medial_points(&self, spacing: f64) -> Result<Vec<Vec3>> {
        if spacing.is_nan() || spacing <= 0.0 {
            return Err(Error::Precondition("spacing must be positive".into()));
        }
        let Some(root) = self.airways.root() else {
            return Ok(Vec::new());
        };
        let mut out = vec![self.airways.node(root)];
        for chain in self.airways.branches() {
            let pts: Vec<Vec3> = chain.iter().map(|&i| self.airways.node(i)).collect();
            let lens: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
            let total: f64 = lens.iter().sum();
            let n = (total / spacing).ceil().max(1.0) as usize;
            for k in 1..=n {
                let s = total * k as f64 / n as f64;
                out.push(point_on_polyline(&pts, &lens, s));
            }
        }
        Ok(out)
    }

    /// Skeleton polylines used as the registration model.
    pub fn skeleton_segments(&self) -> Vec<(Vec3, Vec3)> {
        self.airways.segments()
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = self.to_canonical_string();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serialization");
        s.push('\n');
        s
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        Ok(scene)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_string())?;
        Ok(())
    }
}

fn point_on_polyline(pts: &[Vec3], lens: &[f64], s: f64) -> Vec3 {
    let mut acc = 0.0;
    for (i, &l) in lens.iter().enumerate() {
        if s <= acc + l || i == lens.len() - 1 {
            let t = if l > 0.0 { ((s - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
            return pts[i] + (pts[i + 1] - pts[i]) * t;
        }
        acc += l;
    }
    pts[pts.len() - 1]
}
