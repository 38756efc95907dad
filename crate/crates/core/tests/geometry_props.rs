use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use bronchosteer::geometry::{
    angular_deviation, path_length, path_pose_at, propagate_arc, relative_pose, wrap_angle, Arc, Pose, Vec3,
};
use nalgebra::UnitQuaternion;

fn pose() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-100.0..100.0f64),
        prop::array::uniform3(-3.1..3.1f64),
    )
        .prop_map(|(p, r)| Pose::new(Vec3::from(p), UnitQuaternion::from_euler_angles(r[0], r[1], r[2])))
}

proptest! {
    #[test]
    fn arcs_keep_orientation_orthonormal(start in pose(), k in 0.0..0.05f64, roll in -3.2..3.2f64, s in 0.0..200.0f64) {
        let end = propagate_arc(&start, k, roll, s);
        prop_assert!(end.is_orthonormal(1e-9));
    }

    #[test]
    fn arc_chord_never_exceeds_arclength(start in pose(), k in 0.0..0.05f64, roll in -3.2..3.2f64, s in 0.0..150.0f64) {
        let end = propagate_arc(&start, k, roll, s);
        prop_assert!((end.position - start.position).norm() <= s + 1e-9);
    }

    #[test]
    fn split_arcs_chain_to_the_whole(start in pose(), k in 0.0..0.05f64, roll in -3.2..3.2f64, a in 0.0..60.0f64, b in 0.0..60.0f64) {
        let whole = propagate_arc(&start, k, roll, a + b);
        let arc = Arc::new(start, k, roll, a + b);
        let (first, second) = arc.split(a);
        prop_assert!(second.start.max_abs_diff(&first.end()) < 1e-9);
        prop_assert!(second.end().max_abs_diff(&whole) < 1e-8);
    }

    #[test]
    fn heading_turns_by_kappa_s(start in pose(), k in 0.0..0.02f64, roll in -3.2..3.2f64, s in 0.0..150.0f64) {
        let end = propagate_arc(&start, k, roll, s);
        let turned = angular_deviation(&start.heading(), &end.heading()).unwrap();
        prop_assert!((turned - (k * s).min(std::f64::consts::PI)).abs() < 1e-6 || k * s > std::f64::consts::PI);
    }

    #[test]
    fn relative_pose_recomposes(a in pose(), b in pose()) {
        let r = relative_pose(&a, &b);
        prop_assert!(a.compose(&r).max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn inverse_is_two_sided(a in pose()) {
        prop_assert!(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
        prop_assert!(a.inverse().compose(&a).max_abs_diff(&Pose::identity()) < 1e-9);
    }

    #[test]
    fn wrapped_angles_in_half_open_range(x in -1e4..1e4f64) {
        let w = wrap_angle(x);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let turns = (x - w) / std::f64::consts::TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-6);
    }

    #[test]
    fn path_pose_follows_arcs(start in pose(), k1 in 0.0..0.02f64, k2 in 0.0..0.02f64, l1 in 1.0..40.0f64, l2 in 1.0..40.0f64, u in 0.0..1.0f64) {
        let a = Arc::new(start, k1, 0.3, l1);
        let b = Arc::new(a.end(), k2, -1.1, l2);
        let path = [a, b];
        let total = path_length(&path);
        assert_abs_diff_eq!(total, l1 + l2, epsilon = 1e-12);
        let s = u * total;
        let p = path_pose_at(&path, s).unwrap();
        let expect = if s <= l1 { a.pose_at(s) } else { b.pose_at(s - l1) };
        prop_assert!(p.max_abs_diff(&expect) < 1e-9);
    }
}

#[test]
fn pose_json_round_trip_is_bit_exact() {
    let p = Pose::new(
        Vec3::new(1.0 / 3.0, -2.5e-7, 91.25),
        UnitQuaternion::from_euler_angles(0.1, -2.2, 1.7),
    );
    let text = serde_json::to_string(&p).unwrap();
    let back: Pose = serde_json::from_str(&text).unwrap();
    assert_eq!(p, back);
}

#[test]
fn hand_written_quaternion_is_normalized() {
    let back: Pose = serde_json::from_str(r#"{"position":[0,0,0],"orientation":[2,0,0,0]}"#).unwrap();
    assert_abs_diff_eq!(back.orientation.quaternion().norm(), 1.0, epsilon = 1e-15);
}
