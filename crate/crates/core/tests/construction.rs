use proptest::prelude::*;
use wildgrad_core::driver::{make_schedule, run_construction, RunOptions};
use wildgrad_core::field::AffineBase;
use wildgrad_core::geometry::{Domain, Mat, MatrixPair};
use wildgrad_core::rng;
use wildgrad_core::scenario::{
    boundary_distance, decompose_generic, in_sigma, set_gaps, sigma_member, two_branch_family, two_branch_scenario,
    two_branch_sigma, Scenario,
};

fn generic_two_branch() -> Scenario {
    two_branch_family().scenario("generic", two_branch_sigma().into_sigma(), None).unwrap()
}

fn base(slope: f64) -> AffineBase {
    AffineBase { u0: vec![0.0], grad: Mat::from_rows(1, 1, &[slope]), v: Mat::zeros(1, 1) }
}

#[test]
fn generic_membership_agrees_with_the_closed_form() {
    let (exact, generic) = (two_branch_scenario(), generic_two_branch());
    let (r, lambda) = (0.06, 0.85);
    let dirs = [MatrixPair::scalar(1.0, 0.0), MatrixPair::scalar(-1.0, 0.0), MatrixPair::scalar(0.0, 1.0), MatrixPair::scalar(0.0, -1.0)];
    let member = sigma_member(&exact, r, lambda);
    let mut rg = rng::stream(3, 0);
    let mut inside = 0;
    for _ in 0..60 {
        let y = MatrixPair::scalar(rng::range(&mut rg, -2.5, 2.5), rng::range(&mut rg, -0.1, 0.1));
        let e = in_sigma(&exact, r, lambda, &y);
        if let Ok(dec) = decompose_generic(&generic, r, lambda, &y) {
            assert!(e, "generic witness for {y} outside the exact set");
            assert!(dec.verify(&exact, r, lambda, &y).is_ok());
        } else if e && boundary_distance(&y, &member, &dirs, 1.0) > 1e-2 {
            panic!("{y} lies well inside the exact set but has no generic witness");
        }
        inside += usize::from(e);
    }
    assert!(inside > 5, "only {inside} sampled points inside");
}

#[test]
fn continued_boundary_search_is_a_lower_bound() {
    let (exact, generic) = (two_branch_scenario(), generic_two_branch());
    let dirs = [MatrixPair::scalar(1.0, 0.0), MatrixPair::scalar(-1.0, 0.0)];
    for y1 in [0.3, 1.0, 1.5] {
        let y = MatrixPair::scalar(y1, 0.0);
        for tmax in [0.05, 1.0] {
            let de = boundary_distance(&y, &sigma_member(&exact, 0.06, 0.85), &dirs, tmax);
            let dg = boundary_distance(&y, &sigma_member(&generic, 0.06, 0.85), &dirs, tmax);
            assert!(dg > 0.0 && dg <= de * (1.0 + 1e-6), "y1 = {y1}: generic {dg} vs exact {de}");
            if tmax < 1.0 {
                assert!(dg >= 0.99 * de, "y1 = {y1}: generic {dg} vs exact {de}");
            }
        }
    }
    let ge = set_gaps(&exact, 0.02, 0.06, 0.85, 16, 1).unwrap();
    let gg = set_gaps(&generic, 0.02, 0.06, 0.85, 16, 1).unwrap();
    assert_eq!(ge.d0_raw, gg.d0_raw);
    assert!((gg.d_prime - ge.d_prime).abs() <= 1e-3 * ge.d_prime, "{} vs {}", gg.d_prime, ge.d_prime);
}

#[test]
fn runs_are_reproducible_and_seed_independent_in_verdict() {
    let s = two_branch_scenario();
    let sched = make_schedule(0.1, 0.7, 0.02, s.r0, 2).unwrap();
    let opts = RunOptions { probes: 20, mc_samples: 1000, ..RunOptions::default() };
    let a = run_construction(&s, base(1.4), Domain::unit(1), &sched, &opts, 5).unwrap();
    let b = run_construction(&s, base(1.4), Domain::unit(1), &sched, &opts, 5).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.field.export(), b.field.export());
    let c = run_construction(&s, base(1.4), Domain::unit(1), &sched, &opts, 6).unwrap();
    assert!(a.report.pass() && c.report.pass());
    // λ_3 = 0.925 keeps the branches 3.625 apart, short of the λ = 1 gap.
    assert!((a.report.wildness.min_spread - 3.625).abs() < 1e-12);
    assert_eq!(a.report.wildness.passed, 0);
}

#[test]
fn two_box_domain_keeps_the_boundary_data() {
    let s = two_branch_scenario();
    let omega = Domain::new(vec![
        wildgrad_core::geometry::Cube::new(vec![0.25], 0.25),
        wildgrad_core::geometry::Cube::new(vec![2.0], 0.5),
    ])
    .unwrap();
    let sched = make_schedule(0.1, 0.7, 0.02, s.r0, 1).unwrap();
    let opts = RunOptions { probes: 10, mc_samples: 500, ..RunOptions::default() };
    let c = run_construction(&s, base(1.4), omega, &sched, &opts, 1).unwrap();
    assert!(c.report.pass());
    assert!(c.report.boundary.iter().all(|r| r.achieved == 0.0));
    for x in [0.0, 0.5, 1.5, 2.5] {
        let v = c.field.eval(&[x]);
        assert_eq!(v.du.get(0, 0), 1.4);
        assert!((v.u[0] - 1.4 * x).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn schedules_respect_their_limits(delta in 0.01f64..0.99, l1 in 0.0f64..0.99, r1 in 1e-4f64..0.099, k in 0usize..30) {
        let s = make_schedule(delta, l1, r1, 0.1, k).unwrap();
        prop_assert_eq!(s.lambda.len(), k + 1);
        for w in s.lambda.windows(2) {
            prop_assert!(w[0] < w[1] && w[1] < 1.0);
        }
        for w in s.r.windows(2) {
            prop_assert!(w[0] < w[1] && w[1] < 0.1);
        }
        prop_assert!(s.eps_sum(k) < 0.5 * delta);
    }
}
