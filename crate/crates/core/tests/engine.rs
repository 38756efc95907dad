use std::io::BufReader;

use approx::assert_abs_diff_eq;

use bronchosteer::anatomy::{generate_scene, Scene, SceneParams};
use bronchosteer::engine::record::{
    metrics, read_record, targeting_error, trajectory_error_series, true_targeting_error, write_record, Seeds,
};
use bronchosteer::engine::stats::CohortSummary;
use bronchosteer::engine::{
    manual_site, replay, run_comparison_study, run_deployment, run_manual_baseline, Deployment, SimConfig, Stage,
    StudyReport, StudySpec,
};
use bronchosteer::geometry::{path_pose_at, Vec3};
use bronchosteer::respiration::{BreathModel, VentilatorFault};
use bronchosteer::Error;

fn scene() -> Scene {
    generate_scene(1, &SceneParams::default()).unwrap()
}

/// Plans, pierces and aims like the scripted physician, stopping once the
/// executor is armed.
fn armed(scene: &Scene, config: &SimConfig, i: u64) -> Deployment {
    let target = scene.sample_target(1000 + i).unwrap();
    let mut d = Deployment::new(scene, target, config, Seeds::from_master(i)).unwrap();
    d.plan().unwrap();
    d.select(0).unwrap();
    for _ in 0..config.execution.max_aim_attempts {
        let a = d.alignment().unwrap();
        if a.aligned {
            break;
        }
        d.aim(a.correction.0, a.correction.1, 0.0).unwrap();
    }
    assert_eq!(d.stage(), Stage::Aligned);
    let plan = d.start_autonomous().unwrap();
    assert!(plan.needle_length() > 10.0, "first segment must be a full one");
    d
}

#[test]
fn targeting_error_is_measured_in_the_tracker_frame() {
    let scene = scene();
    let mut rec = run_deployment(
        &scene,
        scene.sample_target(1000).unwrap(),
        &SimConfig::noiseless(),
        Seeds::from_master(0),
    )
    .unwrap();
    let last = rec.tracked_tip.last_mut().unwrap();
    last.position = rec.em_to_scene.inverse().apply(&rec.target) + Vec3::new(1.0, 2.0, 2.0);
    assert_abs_diff_eq!(targeting_error(&rec).unwrap(), 3.0, epsilon = 1e-9);
}

#[test]
fn trajectory_error_of_a_constant_offset() {
    let scene = scene();
    let mut rec = run_deployment(
        &scene,
        scene.sample_target(1001).unwrap(),
        &SimConfig::noiseless(),
        Seeds::from_master(1),
    )
    .unwrap();
    let plan = rec.plan.clone().unwrap();
    let to_em = rec.em_to_scene.inverse();
    let offset = Vec3::new(0.3, -0.4, 0.0);
    for s in rec.tracked_tip.iter_mut() {
        let p = path_pose_at(&plan.needle_path, s.inserted.min(plan.needle_length())).unwrap();
        s.position = to_em.apply(&p.position) + offset;
    }
    let series = trajectory_error_series(&rec);
    assert!(!series.in_window.is_empty());
    for (_, e) in series.in_window.iter().chain(&series.out_of_window) {
        assert_abs_diff_eq!(*e, 0.5, epsilon = 1e-9);
    }
}

#[test]
fn noiseless_deployment_hits_the_target() {
    let scene = scene();
    let rec = run_deployment(
        &scene,
        scene.sample_target(1002).unwrap(),
        &SimConfig::noiseless(),
        Seeds::from_master(2),
    )
    .unwrap();
    assert!(rec.outcome.is_completed(), "{:?}", rec.outcome);
    assert!(true_targeting_error(&rec).unwrap() < 0.5);
    assert!(rec.adverse_events.is_empty());
    let m = metrics(&rec);
    assert!(m.completed && !m.adverse && m.max_trajectory_error < 0.5);
}

#[test]
fn manual_aim_error_follows_the_rayleigh_mean() {
    let scene = scene();
    let sigma = 3f64.to_radians();
    let mut config = SimConfig::noiseless();
    config.manual.aim_noise = sigma;
    config.manual.max_insert = 500.0;
    let mut ratios = Vec::new();
    for i in 0..200u64 {
        let target = scene.sample_target(5000 + i).unwrap();
        let rec = run_manual_baseline(&scene, target, &config, Seeds::from_master(i)).unwrap();
        if !rec.adverse_events.is_empty() {
            continue;
        }
        let start = rec.true_tip[0].position;
        let d = (target - start).norm();
        ratios.push(true_targeting_error(&rec).unwrap() / d);
    }
    assert!(ratios.len() >= 100, "{} clean insertions", ratios.len());
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean / expected - 1.0).abs() < 0.3, "mean {mean}, expected {expected}");
}

#[test]
fn manual_needle_falls_short_of_distant_targets() {
    let scene = scene();
    let config = SimConfig::noiseless();
    let far = (0..2000u64)
        .filter_map(|k| scene.sample_target(9000 + k).ok())
        .find(|t| {
            let (start, _) = manual_site(&scene, t, config.manual.reach_radius).unwrap();
            (t - start).norm() >= 70.0
        })
        .expect("a target 70 mm from every reachable airway");
    let rec = run_manual_baseline(&scene, far, &config, Seeds::from_master(3)).unwrap();
    assert!(rec.inserted_length() <= config.manual.max_insert + 1e-9);
    assert!(true_targeting_error(&rec).unwrap() >= 25.0);
}

/// Noise-free plant and sensing with tidal breathing and gating left on.
fn gated_noiseless() -> SimConfig {
    SimConfig {
        breath: BreathModel::default(),
        ..SimConfig::noiseless()
    }
}

#[test]
fn segment_finishes_well_inside_the_window() {
    let scene = scene();
    let config = gated_noiseless();
    let mut d = armed(&scene, &config, 4);
    let log = d.execute_segment().unwrap();
    assert!(log.completed);
    assert_eq!(log.windows_used, 1);
    let open: Vec<f64> = log.ticks.iter().filter(|t| t.window_open).map(|t| t.t).collect();
    let used = open.last().unwrap() - open.first().unwrap();
    let margin = config.execution.window_len - used;
    assert!(margin >= 5.0 - config.control.tick - 1e-9, "margin {margin}");
}

#[test]
fn in_vivo_segments_mostly_fit_one_window() {
    let scene = scene();
    let config = SimConfig::in_vivo();
    let (mut one, mut total) = (0, 0);
    for i in 20..26u64 {
        let rec = run_deployment(
            &scene,
            scene.sample_target(1000 + i).unwrap(),
            &config,
            Seeds::from_master(i),
        )
        .unwrap();
        for s in &rec.segments {
            total += 1;
            one += (s.windows_used == 1) as usize;
        }
    }
    assert!(one as f64 >= 0.9 * total as f64, "{one}/{total} segments in one window");
}

#[test]
fn early_release_leaves_the_segment_incomplete() {
    let scene = scene();
    let mut config = gated_noiseless();
    config.breath.fault = VentilatorFault::EarlyRelease(4.0);
    let mut d = armed(&scene, &config, 5);
    match d.execute_segment() {
        Err(Error::SegmentIncomplete { remaining }) => {
            assert!((remaining - 2.0).abs() <= 0.1 + 1e-9, "remaining {remaining}")
        }
        other => panic!("expected SegmentIncomplete, got {other:?}"),
    }
    assert_eq!(d.stage(), Stage::Steering);
}

#[test]
fn ignored_hold_requests_time_out() {
    let scene = scene();
    let mut config = SimConfig::in_vivo();
    config.breath.fault = VentilatorFault::IgnoreHoldRequests;
    let mut d = armed(&scene, &config, 6);
    match d.execute_segment() {
        Err(Error::GateTimeout { waited }) => assert!(waited > config.execution.max_gate_wait),
        other => panic!("expected GateTimeout, got {other:?}"),
    }
    assert_eq!(d.stage(), Stage::Done);
    assert_eq!(d.record().outcome.as_str(), "gate_timeout");
    assert!(d.record().tracked_tip.iter().all(|s| s.inserted == 0.0));
}

#[test]
fn stages_reject_out_of_order_calls() {
    let scene = scene();
    let mut d = Deployment::new(
        &scene,
        scene.sample_target(1000).unwrap(),
        &SimConfig::in_vivo(),
        Seeds::from_master(0),
    )
    .unwrap();
    assert!(matches!(d.select(0), Err(Error::Precondition(_))));
    assert!(matches!(d.alignment(), Err(Error::Precondition(_))));
    assert!(matches!(d.start_autonomous(), Err(Error::Precondition(_))));
    assert!(matches!(d.tick(), Err(Error::Precondition(_))));
    d.plan().unwrap();
    assert!(d.select(99).is_err());
    d.abort("operator");
    assert_eq!(d.stage(), Stage::Done);
    assert_eq!(d.record().outcome.as_str(), "aborted");
}

#[test]
fn repeated_runs_are_identical_and_replay() {
    let scene = scene();
    let config = SimConfig::in_vivo();
    let target = scene.sample_target(1007).unwrap();
    let a = run_deployment(&scene, target, &config, Seeds::from_master(7)).unwrap();
    let b = run_deployment(&scene, target, &config, Seeds::from_master(7)).unwrap();
    assert_eq!(a, b);

    let mut buf = Vec::new();
    write_record(&mut buf, &a).unwrap();
    let back = read_record(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(back, a);
    assert_eq!(replay(&scene, &back).unwrap(), a);

    let other = generate_scene(2, &SceneParams::default()).unwrap();
    assert!(replay(&other, &back).is_err());
}

#[test]
fn interactive_sessions_replay_from_their_call_log() {
    let scene = scene();
    let config = SimConfig::in_vivo();
    let target = scene.sample_target(1003).unwrap();
    let mut d = Deployment::interactive(&scene, target, &config, Seeds::from_master(3)).unwrap();
    assert!(d.select(0).is_err());
    d.plan().unwrap();
    d.select(0).unwrap();
    d.aim(0.01, -0.02, 0.0).unwrap();
    while !d.alignment().unwrap().aligned {
        let a = d.alignment().unwrap();
        d.aim(a.correction.0, a.correction.1, 0.0).unwrap();
    }
    d.start_autonomous().unwrap();
    for _ in 0..150 {
        d.tick().unwrap();
    }
    d.request_hold();
    for _ in 0..50 {
        d.tick().unwrap();
    }
    d.abort("operator stop");
    let rec = d.record();
    let log = rec.session.clone().unwrap();
    assert!(log.len() > 6);
    assert_eq!(rec.outcome.as_str(), "aborted");
    assert_eq!(replay(&scene, &rec).unwrap(), rec);

    let mut buf = Vec::new();
    write_record(&mut buf, &rec).unwrap();
    let back = read_record(BufReader::new(&buf[..])).unwrap();
    assert_eq!(back.session, rec.session);
    assert!(run_deployment(&scene, target, &config, Seeds::from_master(3))
        .unwrap()
        .session
        .is_none());
}

#[test]
fn aiming_gives_up_after_the_attempt_limit() {
    let scene = scene();
    let mut config = SimConfig::in_vivo();
    config.execution.max_aim_attempts = 2;
    let target = scene.sample_target(1004).unwrap();
    let mut d = Deployment::interactive(&scene, target, &config, Seeds::from_master(4)).unwrap();
    d.plan().unwrap();
    d.select(0).unwrap();
    d.aim(0.3, 0.0, 0.0).unwrap();
    d.aim(-0.3, 0.0, 0.0).unwrap();
    assert!(matches!(
        d.aim(0.1, 0.0, 0.0),
        Err(Error::AlignmentFailed { attempts: 2 })
    ));
    assert_eq!(d.stage(), Stage::Done);
    assert_eq!(d.record().outcome.as_str(), "alignment_failed");
}

#[test]
fn robot_deployments_are_free_of_adverse_events() {
    let scene = scene();
    for i in 10..14u64 {
        let rec = run_deployment(
            &scene,
            scene.sample_target(1000 + i).unwrap(),
            &SimConfig::in_vivo(),
            Seeds::from_master(i),
        )
        .unwrap();
        assert!(
            rec.adverse_events.is_empty(),
            "deployment {i}: {:?}",
            rec.adverse_events
        );
        assert!(rec.min_true_clearance > 0.0);
    }
}

#[test]
fn study_report_rebuilds_from_stored_records() {
    let scene = scene();
    let spec = StudySpec::new(2, 3, 5);
    let (report, records) = run_comparison_study(&scene, &SimConfig::in_vivo(), &spec).unwrap();
    assert_eq!(report.rows.len(), 5);
    let mut stored = Vec::new();
    for r in &records {
        let mut buf = Vec::new();
        write_record(&mut buf, r).unwrap();
        stored.push(read_record(BufReader::new(buf.as_slice())).unwrap());
    }
    assert_eq!(StudyReport::from_records(&stored), report);
    assert_eq!(
        serde_json::to_string(&StudyReport::from_records(&stored)).unwrap(),
        serde_json::to_string(&report).unwrap()
    );

    let parallel = run_comparison_study(&scene, &SimConfig::in_vivo(), &StudySpec { jobs: 2, ..spec }).unwrap();
    assert_eq!(parallel.0, report);
}

#[test]
fn config_overrides_and_profiles() {
    let mut c = SimConfig::in_vivo();
    c.apply_override("planner.goal_tol=0.5").unwrap();
    assert_eq!(c.planner.goal_tol, 0.5);
    c.apply_override("breath.fault={\"kind\":\"early_release\",\"at\":3.0}")
        .unwrap();
    assert_eq!(c.breath.fault, VentilatorFault::EarlyRelease(3.0));
    assert!(c.apply_override("planner.nonexistent=1").is_err());
    assert!(c.apply_override("planner.goal_tol=-1").is_err());
    assert!(c.apply_override("no_equals_sign").is_err());
    assert_eq!(c.planner.goal_tol, 0.5, "failed overrides leave the config untouched");

    assert_eq!(SimConfig::from_json(&c.to_json()).unwrap(), c);
    assert!(SimConfig::from_json("{\"bogus\": 1}").is_err());
    for name in ["in_vivo", "ex_vivo", "noiseless"] {
        let p = SimConfig::profile(name).unwrap();
        assert_eq!(p.profile, name);
        p.validate().unwrap();
    }
    assert!(SimConfig::profile("underwater").is_err());
    let partial = SimConfig::from_json("{\"execution\": {\"window_len\": 8.0}}").unwrap();
    assert_eq!(partial.execution.window_len, 8.0);
    assert_eq!(partial.planner, SimConfig::in_vivo().planner);
}

#[test]
fn cohort_summary_of_values() {
    let s = CohortSummary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.n, 4);
    assert_abs_diff_eq!(s.mean, 2.5, epsilon = 1e-12);
    assert_abs_diff_eq!(s.sd, (5.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    assert!(CohortSummary::of(&[1.0]).is_err());
}
