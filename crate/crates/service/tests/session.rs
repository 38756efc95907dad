use bronchosteer::anatomy::{generate_scene, SceneParams};
use bronchosteer::engine::{replay, SessionAction};
use bronchosteer_service::{ErrorCode, Event, Request, SceneSource, Session, SessionStage};

fn load(seed: u64, profile: &str) -> Request {
    Request::LoadScene {
        scene: SceneSource::Generate { seed: 1 },
        seed,
        target: None,
        target_seed: None,
        profile: Some(profile.into()),
        overrides: Vec::new(),
        stream_every: None,
    }
}

fn error_code(events: &[Event]) -> Option<ErrorCode> {
    events.iter().find_map(|e| match e {
        Event::Error { code, .. } => Some(*code),
        _ => None,
    })
}

/// Loads, plans, selects the first plan and aims until the indicator is
/// green.
fn aligned_session(seed: u64, profile: &str) -> Session {
    let mut s = Session::new("test");
    assert!(matches!(s.handle(load(seed, profile))[..], [Event::SceneLoaded { .. }]));
    s.handle(Request::RequestPlans);
    s.handle(Request::SelectPlan { index: 0 });
    assert_eq!(s.stage(), SessionStage::Aiming);
    for _ in 0..20 {
        let events = s.handle(Request::QueryAlignment);
        let Event::Alignment {
            aligned, correction, ..
        } = events[0]
        else {
            panic!("expected an alignment event, got {events:?}");
        };
        if aligned {
            break;
        }
        s.handle(Request::Aim {
            yaw: correction.0,
            pitch: correction.1,
            advance: 0.0,
        });
    }
    assert_eq!(s.stage(), SessionStage::Aligned);
    s
}

#[test]
fn full_session_streams_gated_ticks_and_replays() {
    let mut s = aligned_session(2, "in_vivo");
    let started = s.handle(Request::StartAutonomous);
    assert!(matches!(started[0], Event::Autonomous { segments, .. } if segments >= 1));
    assert!(matches!(
        started[1],
        Event::Stage {
            stage: SessionStage::Steering,
            previous: SessionStage::Aligned
        }
    ));
    let mut ticks = Vec::new();
    let mut done = None;
    while s.is_steering() {
        for e in s.clock_tick() {
            match e {
                Event::Tick(t) => ticks.push(t),
                Event::Done { outcome, metrics } => done = Some((outcome, metrics)),
                _ => {}
            }
        }
    }
    let (outcome, metrics) = done.expect("a done event");
    assert_eq!(outcome.as_str(), "completed");
    assert!(metrics.targeting_error.unwrap() < 5.0);
    assert!(ticks.len() > 100);
    for w in ticks.windows(2) {
        assert!(w[1].t > w[0].t);
    }
    for t in &ticks {
        assert!(
            t.insert_v == 0.0 || t.window_open,
            "insertion outside a window at t = {}",
            t.t
        );
    }

    let Event::Record { record } = &s.handle(Request::GetRecord)[0] else {
        panic!("expected a record");
    };
    assert!(record.session.is_some());
    let scene = generate_scene(1, &SceneParams::default()).unwrap();
    assert_eq!(replay(&scene, record).unwrap(), **record);
}

#[test]
fn selecting_a_plan_navigates_with_the_chosen_plan() {
    let mut s = Session::new("select");
    s.handle(load(3, "in_vivo"));
    let Event::Plans { candidates } = s.handle(Request::RequestPlans).remove(0) else {
        panic!("expected plans");
    };
    assert!((3..=5).contains(&candidates.len()));
    let events = s.handle(Request::SelectPlan { index: 2 });
    assert_eq!(
        events[0],
        Event::Stage {
            stage: SessionStage::Navigating,
            previous: SessionStage::Planned
        }
    );
    assert_eq!(
        events[1],
        Event::PlanSelected {
            index: 2,
            plan: candidates[2].clone()
        }
    );
    assert_eq!(
        events[2],
        Event::Stage {
            stage: SessionStage::Aiming,
            previous: SessionStage::Navigating
        }
    );
}

#[test]
fn out_of_range_plan_is_rejected_without_moving() {
    let mut s = Session::new("range");
    s.handle(load(3, "in_vivo"));
    s.handle(Request::RequestPlans);
    let events = s.handle(Request::SelectPlan { index: 99 });
    assert_eq!(error_code(&events), Some(ErrorCode::Domain));
    assert_eq!(s.stage(), SessionStage::Planned);
}

#[test]
fn steering_before_alignment_is_rejected() {
    let mut s = Session::new("guard");
    s.handle(load(4, "in_vivo"));
    s.handle(Request::RequestPlans);
    s.handle(Request::SelectPlan { index: 0 });
    s.handle(Request::Aim {
        yaw: 0.3,
        pitch: 0.0,
        advance: 0.0,
    });
    let before = s.snapshot();
    let events = s.handle(Request::StartAutonomous);
    assert_eq!(events.len(), 1);
    let Event::Error { code, stage, .. } = &events[0] else {
        panic!("expected a rejection");
    };
    assert_eq!(*code, ErrorCode::OutOfOrder);
    assert_eq!(*stage, Some(SessionStage::Aiming));
    assert_eq!(s.snapshot(), before);
}

#[test]
fn requests_outside_their_stage_are_rejected() {
    let mut s = Session::new("idle");
    for req in [
        Request::RequestPlans,
        Request::SelectPlan { index: 0 },
        Request::QueryAlignment,
        Request::StartAutonomous,
        Request::RequestHold,
        Request::GetRecord,
    ] {
        assert_eq!(error_code(&s.handle(req)), Some(ErrorCode::OutOfOrder));
        assert_eq!(s.stage(), SessionStage::Idle);
    }
    s.handle(load(5, "in_vivo"));
    s.handle(Request::RequestPlans);
    for req in [
        load(5, "in_vivo"),
        Request::RequestPlans,
        Request::QueryAlignment,
        Request::RequestHold,
    ] {
        assert_eq!(error_code(&s.handle(req)), Some(ErrorCode::OutOfOrder));
        assert_eq!(s.stage(), SessionStage::Planned);
    }
}

#[test]
fn malformed_lines_get_protocol_errors() {
    let mut s = Session::new("wire");
    let cases = [
        ("not json", ErrorCode::Malformed),
        (r#"{"type":"request_plans"}"#, ErrorCode::Malformed),
        (r#"{"v":1,"type":"warp_drive"}"#, ErrorCode::Malformed),
        (r#"{"v":1,"type":"aim","yaw":0.1}"#, ErrorCode::Malformed),
        (
            r#"{"v":2,"type":"request_plans","id":7}"#,
            ErrorCode::UnsupportedVersion,
        ),
    ];
    for (line, code) in cases {
        let replies = s.handle_line(line);
        assert_eq!(replies.len(), 1, "{line}");
        assert!(
            matches!(replies[0].body, Event::Error { code: c, .. } if c == code),
            "{line}"
        );
    }
    assert_eq!(
        s.handle_line(r#"{"v":2,"type":"x","id":7}"#)[0].id,
        Some(serde_json::json!(7))
    );
    let ok = s.handle_line(r#"{"v":1,"id":"a1","type":"get_snapshot"}"#);
    assert_eq!(ok[0].id, Some(serde_json::json!("a1")));
    assert!(matches!(ok[0].body, Event::Snapshot(_)));
    assert_eq!(s.stage(), SessionStage::Idle);
}

#[test]
fn abort_is_reachable_from_every_live_stage() {
    let stages: [fn() -> Session; 4] = [
        || Session::new("a"),
        || {
            let mut s = Session::new("b");
            s.handle(load(6, "in_vivo"));
            s.handle(Request::RequestPlans);
            s
        },
        || {
            let mut s = Session::new("c");
            s.handle(load(6, "in_vivo"));
            s.handle(Request::RequestPlans);
            s.handle(Request::SelectPlan { index: 0 });
            s
        },
        || {
            let mut s = aligned_session(6, "in_vivo");
            s.handle(Request::StartAutonomous);
            for _ in 0..40 {
                s.clock_tick();
            }
            s
        },
    ];
    for make in stages {
        let mut s = make();
        let from = s.stage();
        let events = s.handle(Request::Abort {
            reason: Some("test".into()),
        });
        assert_eq!(
            events[0],
            Event::Stage {
                stage: SessionStage::Aborted,
                previous: from
            }
        );
        assert_eq!(s.stage(), SessionStage::Aborted);
        assert!(s.clock_tick().is_empty());
        assert_eq!(
            error_code(&s.handle(Request::Abort { reason: None })),
            Some(ErrorCode::OutOfOrder)
        );
        assert!(matches!(s.handle(Request::GetSnapshot)[0], Event::Snapshot(_)));
    }
}

#[test]
fn hold_requests_reach_the_gate_while_steering() {
    let mut s = aligned_session(7, "in_vivo");
    s.handle(Request::StartAutonomous);
    for _ in 0..5 {
        s.clock_tick();
    }
    let events = s.handle(Request::RequestHold);
    assert!(matches!(events[0], Event::HoldRequested { t } if t > 0.0));
    let Event::Record { record } = &s.handle(Request::GetRecord)[0] else {
        panic!("expected a record");
    };
    let log = record.session.as_ref().unwrap();
    assert!(log.contains(&SessionAction::Hold));
}

#[test]
fn simulated_time_only_advances_on_clock_ticks() {
    let mut s = aligned_session(8, "in_vivo");
    let t0 = s.snapshot().t;
    s.handle(Request::QueryAlignment);
    assert!(s.clock_tick().is_empty());
    assert_eq!(s.snapshot().t, t0);
    s.handle(Request::StartAutonomous);
    let start = s.snapshot().t;
    s.clock_tick();
    s.clock_tick();
    let tick = s.tick_period().unwrap();
    assert!((s.snapshot().t - start - 2.0 * tick).abs() < 1e-12);
}

#[test]
fn thinned_streams_keep_window_changes() {
    let mut s = Session::new("thin");
    s.handle(Request::LoadScene {
        scene: SceneSource::Generate { seed: 1 },
        seed: 9,
        target: None,
        target_seed: None,
        profile: None,
        overrides: vec!["execution.max_aim_attempts=20".into()],
        stream_every: Some(50),
    });
    s.handle(Request::RequestPlans);
    s.handle(Request::SelectPlan { index: 0 });
    while !matches!(
        s.handle(Request::QueryAlignment)[0],
        Event::Alignment { aligned: true, .. }
    ) {
        let Event::Alignment { correction, .. } = s.handle(Request::QueryAlignment)[0] else {
            unreachable!()
        };
        s.handle(Request::Aim {
            yaw: correction.0,
            pitch: correction.1,
            advance: 0.0,
        });
    }
    s.handle(Request::StartAutonomous);
    let mut streamed = Vec::new();
    let mut total = 0;
    while s.is_steering() {
        total += 1;
        streamed.extend(s.clock_tick().into_iter().filter_map(|e| match e {
            Event::Tick(t) => Some(t),
            _ => None,
        }));
    }
    assert!(streamed.len() * 10 < total, "{} of {total}", streamed.len());
    let Event::Record { record } = s.handle(Request::GetRecord).remove(0) else {
        panic!("expected a record");
    };
    let all: Vec<_> = record.segments.iter().flat_map(|seg| seg.ticks.iter()).collect();
    assert_eq!(all.len(), total);
    let changes: Vec<f64> = all
        .windows(2)
        .filter(|w| w[0].window_open != w[1].window_open)
        .map(|w| w[1].t)
        .collect();
    assert!(changes.len() >= 2);
    for t in changes {
        assert!(streamed.iter().any(|s| s.t == t), "window change at {t} not streamed");
    }
}

#[test]
fn bad_scene_requests_leave_the_session_idle() {
    let mut s = Session::new("bad");
    let mut req = load(1, "on_the_moon");
    assert_eq!(error_code(&s.handle(req.clone())), Some(ErrorCode::Domain));
    if let Request::LoadScene { profile, overrides, .. } = &mut req {
        *profile = None;
        overrides.push("breath.no_such_field=3".into());
    }
    assert_eq!(error_code(&s.handle(req)), Some(ErrorCode::Domain));
    let missing = Request::LoadScene {
        scene: SceneSource::Path("/nonexistent/scene.json".into()),
        seed: 1,
        target: None,
        target_seed: None,
        profile: None,
        overrides: Vec::new(),
        stream_every: None,
    };
    assert_eq!(error_code(&s.handle(missing)), Some(ErrorCode::Domain));
    assert_eq!(s.stage(), SessionStage::Idle);
    assert_eq!(s.snapshot().scene_hash, None);
}

#[test]
fn exhausted_aiming_ends_the_session() {
    let mut s = Session::new("aim");
    s.handle(Request::LoadScene {
        scene: SceneSource::Generate { seed: 1 },
        seed: 10,
        target: None,
        target_seed: None,
        profile: None,
        overrides: vec!["execution.max_aim_attempts=1".into()],
        stream_every: None,
    });
    s.handle(Request::RequestPlans);
    s.handle(Request::SelectPlan { index: 0 });
    s.handle(Request::Aim {
        yaw: 0.2,
        pitch: 0.0,
        advance: 0.0,
    });
    let events = s.handle(Request::Aim {
        yaw: -0.2,
        pitch: 0.0,
        advance: 0.0,
    });
    assert_eq!(error_code(&events), Some(ErrorCode::Domain));
    assert!(matches!(&events[2], Event::Done { outcome, .. } if outcome.as_str() == "alignment_failed"));
    assert_eq!(s.stage(), SessionStage::Done);
}
