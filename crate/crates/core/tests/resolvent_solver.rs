//! Truncated resolvent hierarchy checked against the exact ring solve and
//! against frozen pilot values, plus the variational lower-bound routes.

use asep_core::dual::DynamicsKind;
use asep_core::lattice::{JumpLaw, TorusGeometry};
use asep_core::oracle::{build_generator_matrix, exact_resolvent_pairing};
use asep_core::resolvent::{
    free_fiber_value, monotonicity_table, solve_truncated_resolvent, variational_bound_d1_with,
    K3Route, ResolventProblem,
};

fn ring_value(lambda: f64, degree: usize, sites: usize) -> f64 {
    let report = solve_truncated_resolvent(&ResolventProblem::torus(
        lambda,
        degree,
        sites,
        DynamicsKind::HardCore,
    ))
    .unwrap();
    assert!(report.converged, "lambda {lambda} degree {degree} did not converge");
    report.value
}

#[test]
fn ring_truncations_bracket_the_exact_pairing() {
    let geom = TorusGeometry::line(8).unwrap();
    let gen = build_generator_matrix(geom, &JumpLaw::tasep_1d()).unwrap();
    // regression pins for the three cutoffs on the 8-ring
    let frozen = [
        (0.1, 0.2167634445, 0.2169005215, 0.2184659426),
        (1.0, 0.0386117788, 0.0386193725, 0.0387931034),
    ];
    for (lambda, f3, f4, f2) in frozen {
        let v2 = ring_value(lambda, 2, 8);
        let v3 = ring_value(lambda, 3, 8);
        let v4 = ring_value(lambda, 4, 8);
        let exact = exact_resolvent_pairing(&gen, lambda, None).unwrap();
        // odd cutoffs bound from below, even cutoffs from above, and the
        // brackets tighten with the degree
        let slack = 1e-8;
        assert!(v3 <= exact + slack && exact <= v4 + slack, "{lambda}: {v3} {exact} {v4}");
        assert!(v4 <= v2 + slack, "{lambda}: {v4} {v2}");
        assert!((v3 - f3).abs() < 1e-8, "lambda {lambda}: v3 {v3} vs {f3}");
        assert!((v4 - f4).abs() < 1e-8, "lambda {lambda}: v4 {v4} vs {f4}");
        assert!((v2 - f2).abs() < 1e-8, "lambda {lambda}: v2 {v2} vs {f2}");
    }
}

#[test]
fn line_window_values_match_frozen_pilots() {
    let cases = [
        (1.0, 2, 400, 0.038627124297),
        (0.1, 2, 400, 0.168847632420),
        (1.0, 3, 60, 0.038369820256),
        (1.0, 4, 24, 0.038373990744),
    ];
    for (lambda, degree, window, frozen) in cases {
        let report = solve_truncated_resolvent(&ResolventProblem::line(
            lambda,
            degree,
            window,
            DynamicsKind::HardCore,
        ))
        .unwrap();
        assert!(report.converged);
        assert!(
            (report.value - frozen).abs() < 1e-9,
            "lambda {lambda} degree {degree} M {window}: {} vs {frozen}",
            report.value
        );
    }
}

#[test]
fn dirichlet_windows_grow_monotonically() {
    let t16 = monotonicity_table(1e-2, 16, DynamicsKind::HardCore, 1e-10).unwrap();
    let t32 = monotonicity_table(1e-2, 32, DynamicsKind::HardCore, 1e-10).unwrap();
    let frozen16 = (0.364266086172, 0.398082432984, 0.557792792587);
    let frozen32 = (0.405233980565, 0.440035180057, 0.592987803001);
    for (t, f) in [(&t16, frozen16), (&t32, frozen32)] {
        assert!((t.value_deg3 - f.0).abs() < 1e-9, "v3 {} vs {}", t.value_deg3, f.0);
        assert!((t.value_deg4 - f.1).abs() < 1e-9, "v4 {} vs {}", t.value_deg4, f.1);
        assert!((t.value_deg2 - f.2).abs() < 1e-9, "v2 {} vs {}", t.value_deg2, f.2);
        // alternating ordering inside one window
        assert!(t.value_deg3 <= t.value_deg4 && t.value_deg4 <= t.value_deg2);
    }
    // a larger Dirichlet window relaxes the zero boundary, so values grow
    assert!(t32.value_deg2 > t16.value_deg2);
    assert!(t32.value_deg3 > t16.value_deg3);
    assert!(t32.value_deg4 > t16.value_deg4);
}

#[test]
fn free_dynamics_values_match_frozen_pilots() {
    let f2 = free_fiber_value(1e-2, 2).unwrap();
    let f3 = free_fiber_value(1e-2, 3).unwrap();
    assert!((f2 - 0.412548747664).abs() < 1e-9, "fiber degree 2: {f2}");
    assert!((f3 - 0.353085544208).abs() < 1e-9, "fiber degree 3: {f3}");
    // deeper truncation can only lower the value
    assert!(f3 < f2);

    let report = solve_truncated_resolvent(&ResolventProblem::line(
        0.1,
        3,
        120,
        DynamicsKind::Free,
    ))
    .unwrap();
    assert!(report.converged);
    assert!(
        (report.value - 0.109805239210).abs() < 1e-9,
        "free window value {}",
        report.value
    );
}

#[test]
fn variational_routes_are_ordered_and_frozen() {
    let sep =
        variational_bound_d1_with(0.1, 0.25, Some(K3Route::SeparableUpper), 1e-10, 200_000)
            .unwrap();
    let win = variational_bound_d1_with(
        0.1,
        0.25,
        Some(K3Route::WindowSolve { window: 120 }),
        1e-10,
        200_000,
    )
    .unwrap();
    assert!(sep.converged && win.converged);
    assert!(sep.bound > 0.0 && win.bound > 0.0);
    // the separable route replaces the two-gap walk resolvent by a larger
    // one, so its backflow constant dominates the window-solved constant and
    // its bound can only be the more conservative of the two
    assert!(sep.k3 >= win.k3, "k3: sep {} win {}", sep.k3, win.k3);
    assert!(sep.bound <= win.bound, "bounds: sep {} win {}", sep.bound, win.bound);
    // separable backflow constant cross-checked against an independent
    // quadrature implementation (agreement limited by its coarser grid)
    let k3_reference = 0.218616105074;
    assert!(
        (sep.k3 - k3_reference).abs() / k3_reference < 1e-4,
        "separable k3 {} vs reference {k3_reference}",
        sep.k3
    );
    // regression pins for both routes
    assert!((sep.bound - 0.125056534966).abs() < 1e-9, "separable bound {}", sep.bound);
    assert!((win.bound - 0.130821817611).abs() < 1e-9, "window bound {}", win.bound);
}

#[test]
fn default_route_value_is_frozen_at_one_percent() {
    let report = variational_bound_d1_with(1e-2, 0.25, None, 1e-10, 200_000).unwrap();
    assert!(report.converged);
    assert!(
        (report.bound - 0.258450230325).abs() < 1e-9,
        "window-route bound {}",
        report.bound
    );
    assert!((report.k3 - 0.399584151605).abs() < 1e-9, "k3 {}", report.k3);
}
