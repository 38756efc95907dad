//! Robot versus manual comparison study.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::Scene;
use crate::error::{Error, Result};

use super::config::SimConfig;
use super::deployment::run_deployment;
use super::manual::run_manual_baseline;
use super::record::{metrics, DeploymentKind, DeploymentRecord, Seeds};
use super::stats::{compare_cohorts, CohortSummary, TTest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub n_robot: usize,
    pub n_manual: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl StudySpec {
    pub fn new(n_robot: usize, n_manual: usize, seed: u64) -> Self {
        Self {
            n_robot,
            n_manual,
            seed,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub id: usize,
    pub kind: DeploymentKind,
    pub length_mm: f64,
    pub error_mm: Option<f64>,
    pub adverse: bool,
    pub seed: u64,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub robot_length: Option<CohortSummary>,
    pub manual_length: Option<CohortSummary>,
    pub robot_error: Option<CohortSummary>,
    pub manual_error: Option<CohortSummary>,
    pub length_test: Option<TTest>,
    pub error_test: Option<TTest>,
    pub robot_completed: usize,
    pub robot_adverse: usize,
}

/// Deployment `i` of a study: kind, target seed and master seed.
pub fn study_job(spec: &StudySpec, i: usize) -> (DeploymentKind, u64) {
    let kind = if i < spec.n_robot {
        DeploymentKind::Robot
    } else {
        DeploymentKind::Manual
    };
    (kind, spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
}

fn run_job(scene: &Scene, config: &SimConfig, spec: &StudySpec, i: usize) -> Result<DeploymentRecord> {
    let (kind, seed) = study_job(spec, i);
    let target = scene.sample_target(seed)?;
    let seeds = Seeds::from_master(seed);
    match kind {
        DeploymentKind::Robot => run_deployment(scene, target, config, seeds),
        DeploymentKind::Manual => run_manual_baseline(scene, target, config, seeds),
    }
}

/// Runs every deployment of the study, one task each, and returns the
/// records in deployment order.
pub fn run_study_records(scene: &Scene, config: &SimConfig, spec: &StudySpec) -> Result<Vec<DeploymentRecord>> {
    let n = spec.n_robot + spec.n_manual;
    let work = || -> Vec<Result<DeploymentRecord>> {
        (0..n)
            .into_par_iter()
            .map(|i| run_job(scene, config, spec, i))
            .collect()
    };
    let results = if spec.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    results.into_iter().collect()
}

pub fn run_comparison_study(
    scene: &Scene,
    config: &SimConfig,
    spec: &StudySpec,
) -> Result<(StudyReport, Vec<DeploymentRecord>)> {
    let records = run_study_records(scene, config, spec)?;
    let report = StudyReport::from_records(&records);
    Ok((report, records))
}

impl StudyReport {
    /// Folds records, in the given order, into the report. Cohort statistics
    /// use completed deployments.
    pub fn from_records(records: &[DeploymentRecord]) -> Self {
        let rows: Vec<StudyRow> = records
            .iter()
            .enumerate()
            .map(|(id, r)| {
                let m = metrics(r);
                StudyRow {
                    id,
                    kind: r.kind,
                    length_mm: m.length_mm,
                    error_mm: m.targeting_error,
                    adverse: m.adverse,
                    seed: r.seeds.master,
                    outcome: r.outcome.as_str().to_string(),
                }
            })
            .collect();
        let cohort = |kind: DeploymentKind, f: &dyn Fn(&StudyRow) -> Option<f64>| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.kind == kind && r.outcome == "completed")
                .filter_map(f)
                .collect()
        };
        let len = |r: &StudyRow| Some(r.length_mm);
        let err = |r: &StudyRow| r.error_mm;
        let rl = cohort(DeploymentKind::Robot, &len);
        let ml = cohort(DeploymentKind::Manual, &len);
        let re = cohort(DeploymentKind::Robot, &err);
        let me = cohort(DeploymentKind::Manual, &err);
        let robot_rows = rows.iter().filter(|r| r.kind == DeploymentKind::Robot);
        Self {
            robot_length: CohortSummary::of(&rl).ok(),
            manual_length: CohortSummary::of(&ml).ok(),
            robot_error: CohortSummary::of(&re).ok(),
            manual_error: CohortSummary::of(&me).ok(),
            length_test: compare_cohorts(&rl, &ml).ok(),
            error_test: compare_cohorts(&re, &me).ok(),
            robot_completed: robot_rows.clone().filter(|r| r.outcome == "completed").count(),
            robot_adverse: robot_rows.filter(|r| r.adverse).count(),
            rows,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `id,kind,length_mm,error_mm,adverse,seed`.
    pub fn write_rows_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "kind", "length_mm", "error_mm", "adverse", "seed"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.id.to_string(),
                r.kind.as_str().to_string(),
                r.length_mm.to_string(),
                r.error_mm.map(|e| e.to_string()).unwrap_or_default(),
                r.adverse.to_string(),
                r.seed.to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Planned versus tracked trajectory of one deployment in the tracker frame:
/// `kind,t,s,x,y,z,window_open`.
pub fn write_trajectory_csv<W: Write>(writer: W, rec: &DeploymentRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["kind", "t", "s", "x", "y", "z", "window_open"])
        .map_err(io)?;
    if let Some(plan) = &rec.plan {
        let to_em = rec.em_to_scene.inverse();
        for (s, p) in crate::geometry::sample_path(&plan.needle_path, 0.5) {
            let q = to_em.apply(&p);
            w.write_record([
                "planned".to_string(),
                String::new(),
                s.to_string(),
                q.x.to_string(),
                q.y.to_string(),
                q.z.to_string(),
                String::new(),
            ])
            .map_err(io)?;
        }
    }
    for t in &rec.tracked_tip {
        let p = t.position;
        w.write_record([
            "tracked".to_string(),
            t.t.to_string(),
            t.inserted.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            t.window_open.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Paired trajectory error of one deployment: `t,traj_err,window_open`.
pub fn write_trajectory_error_csv<W: Write>(writer: W, rec: &DeploymentRecord) -> Result<()> {
    let series = super::record::trajectory_error_series(rec);
    let mut rows: Vec<(f64, f64, bool)> = series
        .in_window
        .iter()
        .map(|&(t, e)| (t, e, true))
        .chain(series.out_of_window.iter().map(|&(t, e)| (t, e, false)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["t", "traj_err", "window_open"]).map_err(io)?;
    for (t, e, open) in rows {
        w.write_record([t.to_string(), e.to_string(), open.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
