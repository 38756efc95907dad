//! Path cost and an independent plan validator.

use serde::{Deserialize, Serialize};

use crate::anatomy::Scene;
use crate::geometry::{Arc, Vec3};

/// Weights of the clearance penalty in [`plan_cost`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub w: f64,
    /// Clearance above which no penalty accrues (mm).
    pub d_safe: f64,
    /// Sampling step for the penalty integral (mm).
    pub step: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w: 5.0,
            d_safe: 3.0,
            step: 0.5,
        }
    }
}

/// Arclength plus `w · ∫ max(0, d_safe − clearance) ds`, integrated with the
/// midpoint rule.
pub fn plan_cost(path: &[Arc], scene: &Scene, weights: &CostWeights) -> f64 {
    let mut length = 0.0;
    let mut penalty = 0.0;
    for arc in path {
        length += arc.arclength;
        if weights.w == 0.0 {
            continue;
        }
        let n = (arc.arclength / weights.step).ceil().max(1.0) as usize;
        let ds = arc.arclength / n as f64;
        for k in 0..n {
            let p = arc.pose_at((k as f64 + 0.5) * ds).position;
            penalty += (weights.d_safe - scene.clearance(&p)).max(0.0) * ds;
        }
    }
    length + weights.w * penalty
}

/// Clearances sampled every `step` mm along the path.
pub fn clearance_profile(path: &[Arc], scene: &Scene, step: f64) -> Vec<f64> {
    crate::geometry::sample_path(path, step)
        .iter()
        .map(|(_, p)| scene.clearance(p))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub items: Vec<CheckItem>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.items.iter().filter(|i| !i.pass).map(|i| i.name.as_str()).collect()
    }
}

pub const CONTINUITY_TOL: f64 = 1e-9;
pub const VALIDATION_STEP: f64 = 0.1;

/// Checks continuity, curvature cap, clearance at 0.1 mm sampling and goal
/// distance. Shares no code with the search's collision checker.
pub fn validate_path(path: &[Arc], scene: &Scene, target: &Vec3, goal_tol: f64) -> ValidationReport {
    let mut items = Vec::new();

    let mut worst_gap: f64 = 0.0;
    let mut positive = true;
    for (i, arc) in path.iter().enumerate() {
        positive &= arc.arclength > 0.0 && arc.arclength.is_finite();
        if i > 0 {
            let prev = path[i - 1].end();
            worst_gap = worst_gap.max(prev.max_abs_diff(&arc.start));
        }
    }
    items.push(CheckItem {
        name: "continuity".into(),
        pass: !path.is_empty() && positive && worst_gap <= CONTINUITY_TOL,
        detail: format!("{} arcs, max joint gap {:.3e}", path.len(), worst_gap),
    });

    let kmax = path.iter().map(|a| a.curvature).fold(0.0, f64::max);
    let negative = path.iter().any(|a| a.curvature < 0.0);
    items.push(CheckItem {
        name: "curvature".into(),
        pass: !negative && kmax <= scene.kappa_max * (1.0 + 1e-12),
        detail: format!("max {:.6} /mm, cap {:.6} /mm", kmax, scene.kappa_max),
    });

    let mut min_c = f64::INFINITY;
    let mut at = 0.0;
    let mut offset = 0.0;
    for arc in path {
        let n = (arc.arclength / VALIDATION_STEP).ceil().max(1.0) as usize;
        for k in 0..=n {
            let s = arc.arclength * k as f64 / n as f64;
            let c = scene.clearance(&arc.pose_at(s).position);
            if c < min_c {
                min_c = c;
                at = offset + s;
            }
        }
        offset += arc.arclength;
    }
    items.push(CheckItem {
        name: "clearance".into(),
        pass: min_c >= scene.clearance_min,
        detail: format!(
            "min {:.3} mm at s = {:.1} mm, required {:.3} mm",
            min_c, at, scene.clearance_min
        ),
    });

    let end_err = path
        .last()
        .map(|a| (a.end().position - target).norm())
        .unwrap_or(f64::INFINITY);
    items.push(CheckItem {
        name: "goal".into(),
        pass: end_err <= goal_tol,
        detail: format!("end {:.3e} mm from target, tolerance {} mm", end_err, goal_tol),
    });
    ValidationReport { items }
}
