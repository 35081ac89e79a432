use proptest::prelude::*;
use ssep_core::cumulants::*;
use ssep_core::exclusion::FullGenerator;
use ssep_core::kernels::heat_kernel;
use ssep_core::lattice::TorusLattice;

fn ring(side: usize) -> TorusLattice {
    TorusLattice::with_side(1, side).unwrap()
}

fn family(lat: &TorusLattice, rho: f64, pts: &[(f64, usize)]) -> PointFamily {
    PointFamily::new(lat, rho, pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()).unwrap()
}

/// Joint moment of the occupation variables selected by `mask`.
fn subset_moment(g: &FullGenerator, rho: f64, pts: &[(f64, usize)], mask: u32) -> f64 {
    let sel: Vec<(f64, usize)> = (0..pts.len()).filter(|i| mask >> i & 1 == 1).map(|i| pts[i]).collect();
    g.moment(rho, &sel)
}

#[test]
fn diagram_formula_with_exclusion_observables() {
    let lat = ring(4);
    let g = FullGenerator::new(&lat).unwrap();
    let layouts: [(usize, usize, Vec<(f64, usize)>); 3] = [
        (1, 2, vec![(0.0, 0), (0.7, 1)]),
        (2, 2, vec![(0.0, 0), (0.3, 1), (0.5, 1), (0.9, 3)]),
        (1, 3, vec![(0.0, 2), (0.4, 3), (1.2, 2)]),
    ];
    for rho in [0.5, 0.3] {
        for (m, p, pts) in &layouts {
            let check = diagram_formula_check(*m, *p, |mask| subset_moment(&g, rho, pts, mask)).unwrap();
            assert!(check.discrepancy < 1e-9, "m={m} p={p} rho={rho}: {check:?}");
        }
    }
}

#[test]
fn diagram_single_pair_is_covariance() {
    let lat = ring(4);
    let g = FullGenerator::new(&lat).unwrap();
    let pts = [(0.0, 0), (0.6, 1)];
    let check = diagram_formula_check(1, 2, |mask| subset_moment(&g, 0.4, &pts, mask)).unwrap();
    let p = heat_kernel(&lat, 2.0, 0.6).unwrap().at(1);
    assert!((check.rhs - 0.24 * p).abs() < 1e-10);
    assert!(check.discrepancy < 1e-10);
}

#[test]
fn martingale_decomposition_on_ring() {
    let lat = ring(4);
    let mut tables = TransitionTables::new(&lat);
    let cases: [(&[usize], &[usize], f64); 4] = [
        (&[0, 1], &[1, 3], 0.5),
        (&[0, 2], &[0, 2], 1.7),
        (&[0, 1, 2], &[3, 1, 0], 0.8),
        (&[0, 1, 3], &[2, 0, 1], 2.5),
    ];
    for (x, y, t) in cases {
        let c = martingale_decomposition_check(&mut tables, x, y, t).unwrap();
        let tol = if x.len() == 2 { 1e-12 } else { 1e-10 };
        assert!(c.discrepancy < tol, "{x:?} -> {y:?}: {c:?}");
    }
}

#[test]
fn closed_form_low_order_cumulants_match_connected_sum() {
    let lat = ring(4);
    let mut tables = TransitionTables::new(&lat);
    let cases: [&[(f64, usize)]; 4] = [
        &[(0.0, 0), (0.4, 1)],
        &[(0.0, 0), (0.3, 2), (0.9, 1)],
        &[(0.2, 3), (0.0, 1), (1.4, 1)],
        &[(0.0, 0), (0.0, 0), (0.5, 2)],
    ];
    for rho in [0.3, 0.5, 0.8] {
        for c in cases {
            let p = family(&lat, rho, c);
            let a = single_path_cumulant(&p).unwrap();
            let b = ssep_cumulant_connected(&mut tables, &p).unwrap();
            assert!((a - b).abs() < 1e-10, "rho={rho} {c:?}: {a} vs {b}");
        }
    }
    let four = family(&lat, 0.3, &[(0.0, 0), (0.1, 1), (0.2, 2), (0.3, 3)]);
    assert!(single_path_cumulant(&four).is_err());
}

#[test]
fn monte_carlo_pair_cumulant_matches_kernel() {
    let lat = ring(8);
    let rho = 0.4;
    let p = family(&lat, rho, &[(0.0, 2), (0.8, 3)]);
    let exact = rho * (1.0 - rho) * heat_kernel(&lat, 2.0, 0.8).unwrap().at(1);
    let mc = mc_cumulant_estimate(&p, 100_000, 11).unwrap();
    assert!((mc.estimate - exact).abs() < 3.0 * mc.std_error, "{mc:?} vs {exact}");
    assert!(mc.ci_low < mc.estimate && mc.estimate < mc.ci_high);
    assert_eq!(mc, mc_cumulant_estimate(&p, 100_000, 11).unwrap());
}

#[test]
fn monte_carlo_third_cumulant_at_one_point_is_bernoulli() {
    let lat = ring(8);
    let rho = 0.2;
    let p = family(&lat, rho, &[(0.0, 5), (0.0, 5), (0.0, 5)]);
    let mc = mc_cumulant_estimate(&p, 40_000, 5).unwrap();
    let want = bernoulli_cumulant(3, rho);
    assert!((mc.estimate - want).abs() < 3.0 * mc.std_error + 1e-12, "{mc:?} vs {want}");
}

#[test]
fn monte_carlo_third_cumulant_follows_closed_form() {
    let lat = ring(8);
    let p = family(&lat, 0.2, &[(0.0, 1), (0.3, 1), (0.5, 2)]);
    let exact = single_path_cumulant(&p).unwrap();
    let mc = mc_cumulant_estimate(&p, 200_000, 9).unwrap();
    assert!((mc.estimate - exact).abs() < 3.0 * mc.std_error, "{mc:?} vs {exact}");
}

#[test]
fn coincident_points_saturate_the_floor() {
    use ssep_core::lattice::SpaceTimePoint;
    let (level, dim) = (3u32, 3usize);
    for k in 2..=4usize {
        let pts = vec![SpaceTimePoint::new(0.25, vec![0.5; dim], true); k];
        let fact: f64 = (1..k).map(|i| i as f64).product();
        let want = fact * 2f64.powf(level as f64 * k as f64 * dim as f64 / 2.0);
        let rhs = cycle_bound_rhs(&pts, level, dim);
        assert!((rhs - want).abs() < 1e-9 * want, "k={k}: {rhs} vs {want}");
    }
}

#[test]
fn cycle_bound_constant_is_stable_across_levels() {
    for order in [2usize, 3] {
        let studies: Vec<CycleStudy> =
            [2u32, 3].iter().map(|&n| cycle_bound_study(3, n, order, 0.3, 200, 17).unwrap()).collect();
        let max: Vec<f64> = studies.iter().map(|s| s.max_ratio).collect();
        assert!(max.iter().all(|m| m.is_finite() && *m > 0.0));
        let spread = max.iter().cloned().fold(0.0, f64::max) / max.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 4.0, "k={order}: {max:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, .. ProptestConfig::default() })]

    #[test]
    fn inversion_round_trip(raw in proptest::collection::vec(0.05f64..0.95, 15)) {
        let mut m = vec![1.0];
        m.extend(raw);
        let back = cumulants_to_moments(4, &moments_to_cumulants(4, &m));
        for (a, b) in m.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_is_symmetric_under_relabelling(
        t in proptest::collection::vec(0.0f64..1.5, 3),
        x in proptest::collection::vec(0usize..4, 3),
        rho in 0.1f64..0.9,
    ) {
        let lat = ring(4);
        let mut tables = TransitionTables::new(&lat);
        let pts: Vec<(f64, usize)> = t.iter().copied().zip(x.iter().copied()).collect();
        let a = ssep_moment(&mut tables, &family(&lat, rho, &pts)).unwrap();
        let rev: Vec<(f64, usize)> = pts.iter().rev().copied().collect();
        let b = ssep_moment(&mut tables, &family(&lat, rho, &rev)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    /// Tied times are separated by `TIME_TIE_EPS` per tie, which moves the
    /// value by at most a few multiples of that shift on the ring.
    #[test]
    fn equal_time_moment_is_bernoulli(x in proptest::collection::vec(0usize..4, 1..5), rho in 0.0f64..1.0) {
        let lat = ring(4);
        let mut tables = TransitionTables::new(&lat);
        let pts: Vec<(f64, usize)> = x.iter().map(|&s| (0.7, s)).collect();
        let got = ssep_moment(&mut tables, &family(&lat, rho, &pts)).unwrap();
        let mut distinct = x.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert!((got - rho.powi(distinct.len() as i32)).abs() < 4.0 * x.len() as f64 * TIME_TIE_EPS);
    }

    #[test]
    fn cumulants_vanish_at_degenerate_density(
        t in proptest::collection::vec(0.0f64..1.0, 3),
        x in proptest::collection::vec(0usize..4, 3),
        full in any::<bool>(),
    ) {
        let lat = ring(4);
        let mut tables = TransitionTables::new(&lat);
        let pts: Vec<(f64, usize)> = t.iter().copied().zip(x.iter().copied()).collect();
        let rho = if full { 1.0 } else { 0.0 };
        let c = ssep_cumulant_connected(&mut tables, &family(&lat, rho, &pts)).unwrap();
        prop_assert!(c.abs() < 1e-14);
    }
}
