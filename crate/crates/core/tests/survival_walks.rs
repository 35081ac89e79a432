use ssep_core::exclusion::{ExclusionTrajectory, FrozenEnvironment, OccupancyState};
use ssep_core::lattice::TorusLattice;
use ssep_core::rng::task_rng;
use ssep_core::survival::*;

#[test]
fn no_killing_means_certain_survival() {
    let lat = TorusLattice::dyadic(2, 2).unwrap();
    let env = ExclusionTrajectory::stationary(&lat, 0.5, 1.0, 10.0, 1).unwrap().freeze();
    let r = simulate_killed_walk(&env, 0.0, &[1.0, 5.0, 10.0], 3, 500, 2).unwrap();
    assert!(r.points.iter().all(|p| p.estimate == 1.0 && p.std_error == 0.0));
    assert!((r.endpoint_histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn full_static_environment_kills_exponentially() {
    let lat = TorusLattice::dyadic(1, 3).unwrap();
    let env = FrozenEnvironment::constant(&OccupancyState::full(&lat), 20.0);
    for eps in [0.1, 0.7] {
        let r = simulate_killed_walk(&env, eps, &[2.0, 13.0], 0, 200, 4).unwrap();
        for p in &r.points {
            assert!((p.estimate - (-eps * p.t).exp()).abs() < 1e-12);
        }
    }
}

#[test]
fn path_integral_matches_explicit_integrator() {
    let lat = TorusLattice::dyadic(1, 3).unwrap();
    let env = ExclusionTrajectory::stationary(&lat, 0.4, 1.0, 30.0, 6).unwrap().freeze();
    let mut rng = task_rng(77, 0);
    for _ in 0..100 {
        let path = sample_walk_path(&lat, 1.0, 30.0, 2, &mut rng);
        for t in [7.5, 30.0] {
            let fast = (-0.3 * path.occupation(&env, t)).exp();
            let slow = (-0.3 * path.occupation_explicit(&env, t)).exp();
            assert!((fast - slow).abs() < 1e-12);
        }
    }
}

#[test]
fn survival_is_monotone_in_eps() {
    let lat = TorusLattice::dyadic(1, 3).unwrap();
    let env = ExclusionTrajectory::stationary(&lat, 0.5, 1.0, 8.0, 3).unwrap().freeze();
    let s: Vec<f64> = [0.0, 0.2, 0.5, 1.0]
        .iter()
        .map(|&e| simulate_killed_walk(&env, e, &[8.0], 1, 300, 10).unwrap().points[0].estimate)
        .collect();
    assert!(s.windows(2).all(|w| w[1] <= w[0]), "{s:?}");
}

#[test]
fn quenched_survival_matches_pam_duality() {
    let lat = TorusLattice::dyadic(1, 4).unwrap();
    let env = ExclusionTrajectory::stationary(&lat, 0.5, 1.0, 12.0, 21).unwrap().freeze();
    let eps = 0.4;
    let mc = simulate_killed_walk(&env, eps, &[12.0], 5, 40_000, 8).unwrap().points[0];
    let dual = survival_by_duality(&env, eps, 12.0, 5, 0.01).unwrap();
    assert!((mc.estimate - dual).abs() < 3.0 * mc.std_error, "{mc:?} vs {dual}");
}

#[test]
fn annealed_survival_dominates_median_quenched() {
    let lat = TorusLattice::dyadic(1, 3).unwrap();
    let mut quenched: Vec<f64> = (0..9)
        .map(|s| {
            let env = ExclusionTrajectory::stationary(&lat, 0.5, 1.0, 6.0, 100 + s).unwrap().freeze();
            survival_by_duality(&env, 0.5, 6.0, 0, 0.01).unwrap()
        })
        .collect();
    let annealed = quenched.iter().sum::<f64>() / quenched.len() as f64;
    quenched.sort_by(f64::total_cmp);
    let spread = quenched[8] - quenched[0];
    assert!(annealed >= quenched[4] - 0.25 * spread, "{annealed} vs {quenched:?}");
}

#[test]
fn scaling_experiment_is_reproducible() {
    let cfg = ScalingConfig {
        dim: 1,
        level: 3,
        eps: vec![0.4, 0.5, 0.6, 0.7, 0.8],
        tau: 0.3,
        rho: 0.5,
        beta: default_beta(1),
        max_horizon: 50.0,
        seeds: vec![1, 2],
        replicas: 200,
    };
    let a = survival_scaling_experiment(&cfg).unwrap();
    let b = survival_scaling_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    let mut single = cfg.clone();
    single.eps = vec![0.5];
    assert!(survival_scaling_experiment(&single).is_err());
}

#[test]
fn leading_coefficient_orders_with_density() {
    let lead = |rho: f64| {
        let cfg = ScalingConfig {
            dim: 3,
            level: 3,
            eps: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            tau: 1.0,
            rho,
            beta: default_beta(3),
            max_horizon: 200.0,
            seeds: vec![1, 2, 3, 4],
            replicas: 2000,
        };
        survival_scaling_experiment(&cfg).unwrap().fit.coefficients[0]
    };
    let (low, high) = (lead(0.3), lead(0.6));
    assert!(low.abs() < high.abs(), "{low} vs {high}");
}
