use proptest::prelude::*;
use ssep_core::exclusion::*;
use ssep_core::kernels::*;
use ssep_core::lattice::*;

#[test]
fn torus_distance_is_a_metric() {
    for (dim, side) in [(1usize, 3usize), (1, 8), (2, 4), (2, 8), (3, 4)] {
        let lat = TorusLattice::with_side(dim, side).unwrap();
        let n = lat.num_sites();
        for x in 0..n {
            assert_eq!(lat.distance_idx(x, x), 0);
            for y in 0..n {
                let dxy = lat.distance_idx(x, y);
                assert_eq!(dxy, lat.distance_idx(y, x));
                assert_eq!(dxy == 0, x == y);
                if n <= 64 {
                    for z in 0..n {
                        assert!(dxy <= lat.distance_idx(x, z) + lat.distance_idx(z, y));
                    }
                }
            }
        }
    }
}

#[test]
fn each_edge_listed_once() {
    for (dim, level) in [(1usize, 2u32), (2, 2), (3, 2), (2, 3)] {
        let lat = TorusLattice::dyadic(dim, level).unwrap();
        assert_eq!(lat.num_edges(), dim << (level as usize * dim));
        let mut seen: Vec<(usize, usize)> = lat.edges().map(|(a, b)| (a.min(b), a.max(b))).collect();
        assert!(seen.iter().all(|&(a, b)| lat.distance_idx(a, b) == 1));
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), lat.num_edges());
    }
}

#[test]
fn heat_kernel_symmetry_semigroup_and_mass() {
    for (dim, side) in [(1usize, 8usize), (2, 8), (3, 4)] {
        let lat = TorusLattice::with_side(dim, side).unwrap();
        let rate = 2.0 * dim as f64;
        let (s, t) = (0.35, 1.2);
        let ps = heat_kernel(&lat, rate, s).unwrap();
        let pt = heat_kernel(&lat, rate, t).unwrap();
        let pst = heat_kernel(&lat, rate, s + t).unwrap();
        assert!((pst.sum() - 1.0).abs() < 1e-10);
        for x in 0..lat.num_sites() {
            assert!(pst.at(x) >= 0.0);
            assert!((pst.at(x) - pst.at(lat.sub(0, x))).abs() < 1e-12);
            let conv: f64 = (0..lat.num_sites()).map(|y| ps.at(y) * pt.at(lat.sub(x, y))).sum();
            assert!((conv - pst.at(x)).abs() < 1e-10);
        }
    }
}

/// Worst ratio of `p_t(x)` to `1 ^ |(t, x)|_s^{-power}` over a log-spaced time
/// grid up to a quarter of the mixing time, optionally for the discrete
/// gradient along the first axis.
fn decay_constant(dim: usize, side: usize, power: f64, gradient: bool) -> f64 {
    let lat = TorusLattice::with_side(dim, side).unwrap();
    let top = (side * side) as f64 / 4.0;
    let mut worst: f64 = 0.0;
    for k in 0..=24 {
        let t = 0.05 * (top / 0.05).powf(k as f64 / 24.0);
        let p = heat_kernel(&lat, 2.0 * dim as f64, t).unwrap();
        for x in 0..lat.num_sites() {
            let v = if gradient { (p.at(lat.shift(x, 0, true)) - p.at(x)).abs() } else { p.at(x) };
            let disp = lat.displacement(x, 0);
            let norm = disp.iter().map(|c| c.unsigned_abs() as f64).fold(t.sqrt(), f64::max);
            worst = worst.max(v * norm.max(1.0).powf(power));
        }
    }
    worst
}

#[test]
fn kernel_decay_constants_are_stable_across_sizes() {
    for dim in 1..=3usize {
        let sides: &[usize] = if dim == 3 { &[8, 16] } else { &[8, 16, 32] };
        for gradient in [false, true] {
            let power = dim as f64 + if gradient { 1.0 } else { 0.0 };
            let c: Vec<f64> = sides.iter().map(|&l| decay_constant(dim, l, power, gradient)).collect();
            let spread = c.iter().cloned().fold(0.0, f64::max) / c.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread < 1.5, "d={dim} gradient={gradient}: {c:?}");
        }
    }
}

#[test]
fn two_particle_bound_is_finite_at_small_time() {
    let lat = TorusLattice::with_side(1, 4).unwrap();
    let chain = LabelledChain::new(&lat, 2).unwrap();
    assert_eq!(chain.states().len(), 12);
    let r = gaussian_bound_check(&chain, 0.2, 1.0, 1.0).unwrap();
    assert_eq!(r.selected, BoundBranch::SmallTime);
    assert!(r.small_time_ratio.is_finite() && r.small_time_ratio > 0.0);
    let diag = gaussian_bound_check(&chain, 1e-6, 1.0, 1.0).unwrap();
    assert!(diag.small_time_ratio <= 1.0 + 1e-9);
}

#[test]
fn generators_are_reversible_and_stationary() {
    let lat = TorusLattice::with_side(1, 6).unwrap();
    let g = FullGenerator::new(&lat).unwrap();
    for rho in [0.2, 0.5, 0.9] {
        assert!(g.detailed_balance_residual(rho) < 1e-12);
        assert!(g.stationarity_residual(rho) < 1e-12);
    }
    let chain = LabelledChain::new(&lat, 2).unwrap();
    let q = chain.generator().to_dense();
    assert!((&q - q.transpose()).amax() < 1e-15);
}

#[test]
fn event_stream_file_roundtrip() {
    let lat = TorusLattice::dyadic(2, 2).unwrap();
    let stream = EventStream::sample(&lat, 1.5, 4.0, 99).unwrap();
    let mut file = tempfile::tempfile().unwrap();
    stream.write_to(&mut file).unwrap();
    use std::io::{Seek, SeekFrom};
    file.seek(SeekFrom::Start(0)).unwrap();
    let back = EventStream::read_from(&file).unwrap();
    assert_eq!(back.times(), stream.times());
    assert_eq!(back.edge_indices(), stream.edge_indices());
    assert_eq!(back.seed(), 99);
}

#[test]
fn constant_test_function_pairs_to_particle_excess() {
    let lat = TorusLattice::dyadic(2, 3).unwrap();
    let traj = ExclusionTrajectory::stationary(&lat, 0.4, 1.0, 64.0, 12).unwrap();
    let count = traj.initial.particle_count() as f64;
    let want = 2f64.powf(-3.0) * (count - 0.4 * 64.0);
    for t in [0.0, 0.3, 1.0] {
        let v = fluctuation_field(&traj, |_| 1.0, 0.4, t).unwrap();
        assert!((v - want).abs() < 1e-12, "t={t}: {v} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, .. ProptestConfig::default() })]

    #[test]
    fn parabolic_norm_is_homogeneous(z in proptest::collection::vec(-5.0f64..5.0, 4), lambda in 0.01f64..20.0) {
        let s = parabolic_scaling(3);
        let scaled: Vec<f64> = z.iter().zip(&s).map(|(&c, &e)| c * lambda.powi(e as i32)).collect();
        let a = parabolic_norm(&scaled, &s).unwrap();
        let b = lambda * parabolic_norm(&z, &s).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn stirring_conserves_and_couples(seed in 0u64..1000, t in 0.0f64..5.0, rho in 0.1f64..0.9) {
        let lat = TorusLattice::dyadic(2, 2).unwrap();
        let traj = ExclusionTrajectory::stationary(&lat, rho, 1.0, 5.0, seed).unwrap();
        let later = traj.occupancy_at(t).unwrap();
        prop_assert_eq!(later.particle_count(), traj.initial.particle_count());
        let positions: Vec<usize> = (0..lat.num_sites()).filter(|&x| traj.initial.get(x) == 1).collect();
        let labelled = LabelledConfiguration::new(&lat, positions).unwrap();
        let moved = evolve_labelled(&labelled, &traj.stream, t).unwrap();
        prop_assert_eq!(moved.indicator(&lat), later);
    }

    #[test]
    fn labelled_transitions_are_exchangeable(
        x in (0usize..5, 0usize..5).prop_filter("distinct", |(a, b)| a != b),
        y in (0usize..5, 0usize..5).prop_filter("distinct", |(a, b)| a != b),
        t in 0.0f64..3.0,
    ) {
        let lat = TorusLattice::with_side(1, 5).unwrap();
        let chain = LabelledChain::new(&lat, 2).unwrap();
        let a = chain.transition(&[x.0, x.1], &[y.0, y.1], t).unwrap();
        let b = chain.transition(&[x.1, x.0], &[y.1, y.0], t).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
