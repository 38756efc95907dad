//! Three-stage planning: airway route and piercing site, aiming orientation,
//! and a curvature-bounded needle path through the parenchyma.

pub mod route;
pub mod search;
pub mod segment;
pub mod validate;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::Scene;
use crate::error::{Error, Result};
use crate::geometry::{angular_deviation, path_length, yaw_pitch_toward, Arc, Pose, Vec3};

pub use route::{piercing_sites, BronchoscopeRoute, PiercingSite};
pub use search::plan_needle_path;
pub use segment::{segment_plan, PathSegment, DEFAULT_SEGMENT_LEN};
pub use validate::{clearance_profile, plan_cost, validate_path, CostWeights, ValidationReport};

pub const PLAN_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub goal_tol: f64,
    /// Total arc extensions across all candidate searches.
    pub budget: usize,
    /// Extensions per alignment probe.
    pub probe_budget: usize,
    pub min_extension: f64,
    pub max_extension: f64,
    pub goal_bias: f64,
    /// Probability that an extension uses a random curvature and roll
    /// instead of steering toward the sample.
    pub random_extension: f64,
    pub heading_weight: f64,
    pub sampling_padding: f64,
    pub check_margin: f64,
    pub check_resolution: f64,
    pub max_needle_length: f64,
    pub scope_radius: f64,
    pub narrow_branch_penalty: f64,
    pub min_pierce_radius: f64,
    /// Gap between the airway wall and the needle start, beyond `clearance_min`.
    pub start_offset: f64,
    /// Half-angle of the aiming cone about the wall normal (rad).
    pub aim_cone: f64,
    pub site_spacing: f64,
    /// Piercing sites searched in parallel per request.
    pub max_sites: usize,
    pub min_site_separation: f64,
    pub align_threshold: f64,
    /// Fraction of the scene curvature cap the search may use.
    #[serde(default = "unit")]
    pub kappa_fraction: f64,
    pub cost: CostWeights,
}

fn unit() -> f64 {
    1.0
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            goal_tol: 1.0,
            budget: 50_000,
            probe_budget: 1_500,
            min_extension: 2.0,
            max_extension: 10.0,
            goal_bias: 0.2,
            random_extension: 0.3,
            heading_weight: 20.0,
            sampling_padding: 25.0,
            check_margin: 0.25,
            check_resolution: 0.5,
            max_needle_length: 130.0,
            scope_radius: 3.0,
            narrow_branch_penalty: 40.0,
            min_pierce_radius: 2.0,
            start_offset: 0.5,
            aim_cone: 75f64.to_radians(),
            site_spacing: 2.0,
            max_sites: 8,
            min_site_separation: 5.0,
            align_threshold: 5f64.to_radians(),
            kappa_fraction: 1.0,
            cost: CostWeights::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("goal_tol", self.goal_tol),
            ("min_extension", self.min_extension),
            ("check_resolution", self.check_resolution),
            ("max_needle_length", self.max_needle_length),
            ("site_spacing", self.site_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("planner.{name} must be > 0, got {v}")));
            }
        }
        if self.max_extension < self.min_extension {
            return Err(Error::Config("planner.max_extension < min_extension".into()));
        }
        for (name, v) in [
            ("goal_bias", self.goal_bias),
            ("random_extension", self.random_extension),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("planner.{name} must lie in [0, 1]")));
            }
        }
        if !(self.kappa_fraction > 0.0 && self.kappa_fraction <= 1.0) {
            return Err(Error::Config("planner.kappa_fraction must lie in (0, 1]".into()));
        }
        if self.max_sites == 0 {
            return Err(Error::Config("planner.max_sites must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeStagePlan {
    pub bronchoscope_route: BronchoscopeRoute,
    pub piercing_pose: Pose,
    pub aiming_orientation: Vec3,
    pub needle_path: Vec<Arc>,
    pub cost: f64,
    pub clearance_profile: Vec<f64>,
}

impl ThreeStagePlan {
    pub fn needle_length(&self) -> f64 {
        path_length(&self.needle_path)
    }

    pub fn needle_start(&self) -> Pose {
        self.needle_path[0].start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub target: Vec3,
    pub k: usize,
    pub goal_tol: f64,
    pub rng_seed: u64,
}

impl PlanRequest {
    pub fn new(target: Vec3, rng_seed: u64) -> Self {
        Self {
            target,
            k: 5,
            goal_tol: 1.0,
            rng_seed,
        }
    }
}

fn site_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(0xA5A5)
}

fn build_plan(site: &PiercingSite, path: Vec<Arc>, scene: &Scene, config: &PlannerConfig) -> ThreeStagePlan {
    let cost = site.route.cost + plan_cost(&path, scene, &config.cost);
    ThreeStagePlan {
        bronchoscope_route: site.route.clone(),
        piercing_pose: Pose::from_heading(site.wall_point, &site.normal),
        aiming_orientation: site.start.heading(),
        clearance_profile: clearance_profile(&path, scene, config.cost.step),
        needle_path: path,
        cost,
    }
}

/// Orders plans by cost, then needle length, then search order.
fn sort_plans(plans: &mut [(usize, ThreeStagePlan)]) {
    plans.sort_by(|(ia, a), (ib, b)| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.needle_length().total_cmp(&b.needle_length()))
            .then(ia.cmp(ib))
    });
}

/// Up to `req.k` diverse candidate plans sorted by ascending cost.
pub fn plan_candidates(scene: &Scene, req: &PlanRequest, config: &PlannerConfig) -> Result<Vec<ThreeStagePlan>> {
    config.validate()?;
    if req.k == 0 {
        return Err(Error::Precondition("k must be >= 1".into()));
    }
    if !(req.goal_tol > 0.0) {
        return Err(Error::Precondition("goal_tol must be > 0".into()));
    }
    let tc = scene.clearance(&req.target);
    if tc < scene.clearance_min {
        return Err(Error::Precondition(format!(
            "target clearance {tc:.3} mm is below {} mm",
            scene.clearance_min
        )));
    }
    let config = PlannerConfig {
        goal_tol: req.goal_tol,
        ..*config
    };
    let sites = route::diverse_sites(
        piercing_sites(scene, &req.target, &config),
        config.max_sites,
        config.min_site_separation,
    );
    if sites.is_empty() {
        return Err(Error::NoPlanFound {
            best_clearance: tc,
            samples: 0,
        });
    }
    let per_site = config.budget / sites.len();
    let results: Vec<Result<Vec<Arc>>> = sites
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            plan_needle_path(
                &s.start,
                &req.target,
                scene,
                &config,
                site_seed(req.rng_seed, i),
                per_site,
            )
        })
        .collect();

    let mut plans = Vec::new();
    let mut best_clearance = f64::NEG_INFINITY;
    for (i, (site, r)) in sites.iter().zip(results).enumerate() {
        match r {
            Ok(path) => {
                if validate_path(&path, scene, &req.target, config.goal_tol).pass() {
                    plans.push((i, build_plan(site, path, scene, &config)));
                }
            }
            Err(Error::NoPlanFound { best_clearance: c, .. }) => best_clearance = best_clearance.max(c),
            Err(e) => return Err(e),
        }
    }
    if plans.is_empty() {
        return Err(Error::NoPlanFound {
            best_clearance,
            samples: per_site * sites.len(),
        });
    }
    sort_plans(&mut plans);
    plans.truncate(req.k);
    Ok(plans.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub aligned: bool,
    /// Angle between the tip heading and the direction to the target.
    pub deviation: f64,
    pub feasible: bool,
    /// Tip-frame yaw and pitch that would point the tip at the target.
    pub correction: (f64, f64),
}

/// Alignment indicator: heading within the threshold of the target direction
/// and a short probe search succeeds from the current tip.
pub fn check_alignment(tip: &Pose, target: &Vec3, scene: &Scene, config: &PlannerConfig, seed: u64) -> Alignment {
    let to_target = target - tip.position;
    let dir = to_target.normalize();
    let heading = tip.heading().normalize();
    let deviation = angular_deviation(&heading, &dir).unwrap_or(std::f64::consts::PI);
    let mut correction = yaw_pitch_toward(tip, &dir);
    if correction.0.abs() < 1e-15 {
        correction.0 = 0.0;
    }
    if correction.1.abs() < 1e-15 {
        correction.1 = 0.0;
    }
    let within = deviation <= config.align_threshold;
    let feasible = within
        && scene.clearance(&tip.position) >= scene.clearance_min
        && plan_needle_path(tip, target, scene, config, seed, config.probe_budget).is_ok();
    Alignment {
        aligned: within && feasible,
        deviation,
        feasible,
        correction,
    }
}

/// Replaces the needle path of `prior` with a fresh search from `tip`.
pub fn replan(
    tip: &Pose,
    target: &Vec3,
    scene: &Scene,
    prior: &ThreeStagePlan,
    config: &PlannerConfig,
    seed: u64,
) -> Result<ThreeStagePlan> {
    let path = plan_needle_path(
        tip,
        target,
        scene,
        config,
        seed,
        config.budget / config.max_sites.max(1),
    )?;
    let report = validate_path(&path, scene, target, config.goal_tol);
    if !report.pass() {
        return Err(Error::NoPlanFound {
            best_clearance: scene.clearance(&tip.position),
            samples: 0,
        });
    }
    Ok(ThreeStagePlan {
        bronchoscope_route: prior.bronchoscope_route.clone(),
        piercing_pose: prior.piercing_pose,
        aiming_orientation: tip.heading(),
        cost: prior.bronchoscope_route.cost + plan_cost(&path, scene, &config.cost),
        clearance_profile: clearance_profile(&path, scene, config.cost.step),
        needle_path: path,
    })
}

/// On-disk plan document with everything needed to reproduce the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: u32,
    pub scene_hash: String,
    pub target: Vec3,
    pub seed: u64,
    pub k: usize,
    pub goal_tol: f64,
    pub candidates: Vec<ThreeStagePlan>,
}

impl PlanFile {
    pub fn new(scene: &Scene, req: &PlanRequest, candidates: Vec<ThreeStagePlan>) -> Self {
        Self {
            version: PLAN_FILE_VERSION,
            scene_hash: scene.hash(),
            target: req.target,
            seed: req.rng_seed,
            k: req.k,
            goal_tol: req.goal_tol,
            candidates,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let f: PlanFile = serde_json::from_str(text)?;
        if f.version != PLAN_FILE_VERSION {
            return Err(Error::Parse(format!("unsupported plan version {}", f.version)));
        }
        Ok(f)
    }

    pub fn to_string_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}
