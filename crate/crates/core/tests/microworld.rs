//! Kinematics, maneuver classification and scenario generation properties.

use flowdrive::metrics::{score, MetricConfig};
use flowdrive::microworld::scene::{Archetype, Label};
use flowdrive::microworld::trajectory::{
    classify_maneuver, controls_from_trajectory, rollout_kinematic, EgoState, ManeuverThresholds,
};
use flowdrive::microworld::generate_scenario;
use flowdrive::Vec2;
use proptest::prelude::*;

fn controls(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0..3.0f64, -0.4..0.4f64), n)
}

fn circumcentre(a: Vec2, b: Vec2, c: Vec2) -> Vec2 {
    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    let (a2, b2, c2) = (a.dot(a), b.dot(b), c.dot(c));
    Vec2::new(
        (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d,
        (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d,
    )
}

#[test]
fn constant_yaw_rate_traces_a_circle() {
    // Euler steps are chords of the circle of radius v dt / (2 sin(w dt / 2))
    for (v, w) in [(5.0, 0.3), (8.0, -0.2), (3.0, 0.5)] {
        let start = EgoState::new(Vec2::zero(), 0.0, v, 0.0);
        let t = rollout_kinematic(&start, &[(0.0, w); 12], 0.5).unwrap();
        let p = t.positions();
        let c = circumcentre(p[0], p[5], p[11]);
        let r = p[0].dist(c);
        for q in &p {
            assert!((q.dist(c) - r).abs() / r < 1e-9);
        }
        let chord = v * 0.5 / (2.0 * (w.abs() * 0.5 / 2.0).sin());
        assert!((r - chord).abs() / chord < 1e-9);
    }
    // and the radius tends to v / w as w dt -> 0
    let (v, w) = (5.0, 0.002);
    let start = EgoState::new(Vec2::zero(), 0.0, v, 0.0);
    let p = rollout_kinematic(&start, &vec![(0.0, w); 40], 0.5).unwrap().positions();
    let r = p[0].dist(circumcentre(p[0], p[19], p[39]));
    assert!((r - v / w).abs() / (v / w) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rollout_keeps_dt_and_count(c in controls(10), v in 0.0..15.0f64, dt in 0.1..1.0f64) {
        let start = EgoState::new(Vec2::new(1.0, -2.0), 0.3, v, 0.0);
        let t = rollout_kinematic(&start, &c, dt).unwrap();
        prop_assert_eq!(t.len(), c.len());
        prop_assert_eq!(t.dt, dt);
        for w in &t.waypoints {
            prop_assert!(w.heading > -std::f64::consts::PI && w.heading <= std::f64::consts::PI);
        }
    }

    #[test]
    fn derived_controls_reproduce_the_rollout(c in controls(10), v in 0.5..15.0f64) {
        let start = EgoState::new(Vec2::zero(), 0.1, v, 0.0);
        let t = rollout_kinematic(&start, &c, 0.5).unwrap();
        let back = controls_from_trajectory(&start, &t);
        let again = rollout_kinematic(&start, &back, 0.5).unwrap();
        for (a, b) in t.waypoints.iter().zip(&again.waypoints) {
            prop_assert!(a.position().dist(b.position()) < 1e-9);
            prop_assert!((a.heading - b.heading).abs() < 1e-9);
        }
    }

    #[test]
    fn classification_is_rigid_invariant_and_reflection_equivariant(
        c in controls(10),
        v in 0.5..12.0f64,
        angle in -3.0..3.0f64,
        sx in -50.0..50.0f64,
        sy in -50.0..50.0f64,
    ) {
        let th = ManeuverThresholds::default();
        let start = EgoState::new(Vec2::zero(), 0.0, v, 0.0);
        let t = rollout_kinematic(&start, &c, 0.5).unwrap();
        let base = classify_maneuver(&t, &th);
        let moved = classify_maneuver(&t.transformed(angle, Vec2::new(sx, sy)), &th);
        prop_assert_eq!(moved.longitudinal, base.longitudinal);
        prop_assert_eq!(moved.lateral, base.lateral);
        let mirrored = classify_maneuver(&t.reflected(), &th);
        prop_assert_eq!(mirrored.longitudinal, base.longitudinal);
        prop_assert_eq!(mirrored.lateral, base.lateral.mirrored());
    }

    #[test]
    fn negatives_never_outscore_their_positive_sibling(seed in 0u64..100_000, arch in 0usize..7) {
        let a = Archetype::ALL[arch];
        let cfg = MetricConfig::default();
        let pos = generate_scenario(seed, a, Label::Positive);
        let neg = generate_scenario(seed, a, Label::Negative);
        prop_assert_eq!(&pos.scene, &neg.scene);
        let p = score(&pos.reference, &pos, None, &cfg).pdms;
        let n = score(&neg.reference, &neg, None, &cfg).pdms;
        prop_assert!(n <= p, "{}: negative {} > positive {}", neg.id, n, p);
    }

    #[test]
    fn generation_is_a_pure_function(seed in 0u64..100_000, arch in 0usize..7, label in 0usize..3) {
        let l = [Label::Positive, Label::Negative, Label::Recovery][label];
        let a = generate_scenario(seed, Archetype::ALL[arch], l);
        let b = generate_scenario(seed, Archetype::ALL[arch], l);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert!(a.reference.first().position().dist(a.current_pose().position()) <= 0.5);
        prop_assert!(a.scene.check(a.reference.dt).is_ok());
    }
}
