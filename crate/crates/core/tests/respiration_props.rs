use proptest::prelude::*;

use bronchosteer::respiration::{
    gate_update, BreathModel, GateState, Phase, VentilatorFault, MIN_CYCLES_BETWEEN_HOLDS,
};

const WINDOW: f64 = 10.0;

/// Drives the gate with a random request pattern and checks the
/// structural invariants at every step.
fn drive(model: &BreathModel, steps: &[(f64, bool)]) -> Result<Vec<(f64, f64)>, TestCaseError> {
    let p = model.period;
    let mut g = GateState::new();
    let mut t = 0.0;
    let mut holds = Vec::new();
    let mut open_at: Option<f64> = None;
    for &(dt, request) in steps {
        t += dt;
        let next = gate_update(&g, model, t, request, WINDOW);
        prop_assert_eq!(next.window_open, next.phase == Phase::Holding);
        prop_assert!(next.hold_elapsed <= WINDOW + 1e-9);
        prop_assert!(next.window_remaining(WINDOW) >= 0.0);
        if next.phase == Phase::Holding {
            let start = next.hold_start.unwrap();
            let frac = next.breath_clock.rem_euclid(p);
            prop_assert!(
                (frac - p / 2.0).abs() < 1e-9,
                "hold away from peak: clock {}",
                next.breath_clock
            );
            if open_at != Some(start) {
                if let Some(&(_, end)) = holds.last() {
                    prop_assert!(start - end >= MIN_CYCLES_BETWEEN_HOLDS as f64 * p - 1e-9);
                }
                open_at = Some(start);
            }
        }
        if next.holds_completed > g.holds_completed && g.phase == Phase::Holding {
            // the breathing clock only runs after the release
            let release = t - (next.breath_clock - g.breath_clock);
            holds.push((g.hold_start.unwrap(), release));
        }
        g = next;
    }
    Ok(holds)
}

fn steps() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.01..3.0f64, prop::bool::weighted(0.3)), 50..400)
}

fn fine_steps_of(steps: &[(f64, bool)]) -> Vec<(f64, bool)> {
    steps.iter().map(|&(dt, r)| (dt.min(0.9), r)).collect()
}

// shorter than any hold, so every opening is observed
fn fine_steps() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.01..0.9f64, prop::bool::weighted(0.3)), 100..800)
}

proptest! {
    #[test]
    fn gate_invariants_hold(period in 2.0..6.0f64, steps in steps()) {
        let model = BreathModel { period, ..BreathModel::default() };
        for (s, e) in drive(&model, &fine_steps_of(&steps))? {
            prop_assert!((e - s - WINDOW).abs() < 1e-9);
        }
    }

    #[test]
    fn early_release_shortens_holds(at in 1.0..9.0f64, steps in fine_steps()) {
        let model = BreathModel { fault: VentilatorFault::EarlyRelease(at), ..BreathModel::default() };
        let holds = drive(&model, &steps)?;
        for (s, e) in holds {
            prop_assert!((e - s - at).abs() < 1e-9, "held {} for {at}", e - s);
        }
    }

    #[test]
    fn ignored_requests_never_open(steps in steps()) {
        let model = BreathModel { fault: VentilatorFault::IgnoreHoldRequests, ..BreathModel::default() };
        let holds = drive(&model, &steps)?;
        prop_assert!(holds.is_empty());
    }

    #[test]
    fn coarse_and_fine_stepping_agree(split in prop::collection::vec(0.05..2.0f64, 1..20)) {
        let model = BreathModel::default();
        let start = gate_update(&GateState::new(), &model, 0.5, true, WINDOW);
        let end = start.t + split.iter().sum::<f64>();
        let coarse = gate_update(&start, &model, end, false, WINDOW);
        let mut fine = start;
        let mut t = start.t;
        for dt in &split {
            t += dt;
            fine = gate_update(&fine, &model, t, false, WINDOW);
        }
        prop_assert_eq!(coarse.phase, fine.phase);
        prop_assert_eq!(coarse.holds_completed, fine.holds_completed);
        prop_assert!((coarse.breath_clock - fine.breath_clock).abs() < 1e-9);
    }
}

#[test]
fn marker_drifts_during_a_hold() {
    let model = BreathModel::default();
    let mut g = gate_update(&GateState::new(), &model, 0.0, true, WINDOW);
    g = gate_update(&g, &model, model.period / 2.0 + 6.0, false, WINDOW);
    assert_eq!(g.phase, Phase::Holding);
    let expected = model.amplitude - model.hold_drift_rate * 6.0;
    assert!((model.marker_clean(&g) - expected).abs() < 1e-9);
}

#[test]
fn ex_vivo_marker_is_flat() {
    let model = BreathModel::ex_vivo();
    let mut g = GateState::new();
    for i in 1..100 {
        g = gate_update(&g, &model, i as f64 * 0.37, i % 7 == 0, WINDOW);
        assert_eq!(model.marker_clean(&g), 0.0);
    }
}

#[test]
fn validate_rejects_bad_models() {
    assert!(BreathModel {
        period: 0.0,
        ..BreathModel::default()
    }
    .validate()
    .is_err());
    assert!(BreathModel {
        noise: -1.0,
        ..BreathModel::default()
    }
    .validate()
    .is_err());
    assert!(BreathModel {
        fault: VentilatorFault::EarlyRelease(0.0),
        ..BreathModel::default()
    }
    .validate()
    .is_err());
    assert!(BreathModel::default().validate().is_ok());
}

#[test]
fn stepping_onto_peaks_always_advances() {
    for period in [2.7, 3.3, 4.1, 5.9] {
        let model = BreathModel {
            period,
            ..BreathModel::default()
        };
        let mut g = GateState::new();
        for k in 0..200 {
            let t = period / 2.0 + k as f64 * period;
            g = gate_update(&g, &model, t, false, WINDOW);
            assert_eq!(g.t, t);
        }
    }
}
