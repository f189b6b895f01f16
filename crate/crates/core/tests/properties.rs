mod common;

use common::*;
use proptest::prelude::*;
use untomo::radon::{forward_project, shift_projection};
use untomo::Projection;

fn assert_ok(c: Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}

#[test]
fn moment_identity_holds_to_order_seven() {
    for seed in 1..=3 {
        assert_ok(hlcc_identity(seed));
    }
}

#[test]
fn hlcc_energy_never_rises() {
    for seed in 1..=3 {
        assert_ok(hlcc_energy_monotone(seed));
    }
}

#[test]
fn lloyd_objective_never_rises() {
    for seed in 1..=3 {
        assert_ok(kmeans_monotone(seed));
    }
}

#[test]
fn pose_steps_never_raise_the_objective() {
    for seed in 1..=3 {
        assert_ok(pose_step_monotone(seed));
    }
}

#[test]
fn shrinkage_objective_never_rises() {
    for seed in 1..=3 {
        assert_ok(beta_monotone(seed));
    }
}

#[test]
fn image_gradient_matches_finite_differences() {
    for seed in 1..=3 {
        assert_ok(refine_gradient(seed));
    }
}

#[test]
fn registration_removes_the_gauge() {
    for seed in 1..=2 {
        assert_ok(registration_gauge(seed));
    }
}

#[test]
fn report_is_independent_of_worker_count() {
    assert_ok(worker_invariance(5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projector_is_adjoint(seed in any::<u64>()) {
        prop_assert!(radon_adjoint(seed).is_ok(), "{:?}", radon_adjoint(seed));
    }

    #[test]
    fn projection_mass_is_angle_invariant(seed in 0u64..1000, angle in 0.0..std::f64::consts::PI) {
        let img = phantom(32, seed);
        let m = forward_project(&img, angle).mass();
        prop_assert!((m - img.mass()).abs() <= 1e-2 * img.mass().abs());
    }

    #[test]
    fn integer_shifts_round_trip(bins in proptest::collection::vec(-5.0..5.0f64, 24), s in -3i32..=3) {
        let mut bins = bins;
        let n = bins.len();
        bins[..3].fill(0.0);
        bins[n - 3..].fill(0.0);
        let p = Projection::new(bins).unwrap();
        let back = shift_projection(&shift_projection(&p, s as f64).unwrap(), -s as f64).unwrap();
        for (a, b) in p.bins().iter().zip(back.bins()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_angles_lie_in_half_turn(a in -100.0..100.0f64) {
        let c = untomo::canonicalize_angle(a).unwrap();
        prop_assert!((0.0..std::f64::consts::PI).contains(&c));
        let k = ((a - c) / std::f64::consts::PI).round();
        prop_assert!((a - c - k * std::f64::consts::PI).abs() < 1e-9);
    }
}
