//! Full deployments, the manual baseline, metrics and the comparison study.

pub mod config;
pub mod deployment;
pub mod manual;
pub mod record;
pub mod stats;
pub mod study;

use crate::anatomy::Scene;
use crate::error::{Error, Result};

pub use config::{ExecutionConfig, ManualConfig, PlanChoice, SimConfig, PROFILES};
pub use deployment::{run_deployment, Deployment, Stage, TickOutcome};
pub use manual::{manual_site, run_manual_baseline};
pub use record::{
    metrics, read_record, targeting_error, trajectory_error_series, true_targeting_error, write_record, AdverseEvent,
    DeploymentKind, DeploymentMetrics, DeploymentRecord, Outcome, Seeds, SessionAction, TrajectoryErrorSeries,
};
pub use stats::{compare_cohorts, compare_summaries, permutation_p_value, CohortSummary, TTest};
pub use study::{run_comparison_study, run_study_records, StudyReport, StudyRow, StudySpec};

/// Re-executes a record from its scene, target, configuration and seeds.
pub fn replay(scene: &Scene, rec: &DeploymentRecord) -> Result<DeploymentRecord> {
    let hash = scene.hash();
    if hash != rec.scene_hash {
        return Err(Error::Precondition(format!(
            "scene hash {hash} does not match the record's {}",
            rec.scene_hash
        )));
    }
    if let Some(actions) = &rec.session {
        return deployment::replay_session(scene, rec.target, &rec.config, rec.seeds, actions);
    }
    match rec.kind {
        DeploymentKind::Robot => run_deployment(scene, rec.target, &rec.config, rec.seeds),
        DeploymentKind::Manual => run_manual_baseline(scene, rec.target, &rec.config, rec.seeds),
    }
}
