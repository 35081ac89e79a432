use ssep_core::cumulants::bernoulli_cumulant;
use ssep_core::kernels::{heat_kernel, kernel_order};
use ssep_core::lattice::TorusLattice;
use ssep_core::quadrature::GaussRule;
use ssep_core::renorm::*;

fn quad() -> RenormQuadrature {
    RenormQuadrature::default()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn cn_matches_direct_return_probability_integral() {
    for (level, dim) in [(2u32, 3usize), (3, 2), (3, 1)] {
        let lat = TorusLattice::dyadic(dim, level).unwrap();
        let top = 4f64.powi(level as i32);
        let rate = 2.0 * dim as f64;
        let i = simpson(|s| time_cutoff(s / top) * heat_kernel(&lat, rate, 2.0 * s).unwrap().at(0), 0.0, top, 20_000);
        let want = bernoulli_cumulant(2, 0.4) * 2f64.powi((dim as i32 - 2) * level as i32) * i;
        let got = compute_cn(level, dim, 0.4, quad()).unwrap();
        assert!((got - want).abs() < 1e-5 * want, "N={level} d={dim}: {got} vs {want}");
    }
}

/// Second-order constants on a small two-dimensional torus from full
/// spatial sums of heat kernels over the same time nodes.
#[test]
fn second_order_constants_match_spatial_sums() {
    let (level, dim, rho) = (2u32, 2usize, 0.35);
    let lat = TorusLattice::dyadic(dim, level).unwrap();
    let rule = GaussRule::dyadic(2 * level, 1, 8);
    let top = 4f64.powi(level as i32);
    let cw: Vec<f64> = rule.nodes.iter().zip(&rule.weights).map(|(s, w)| w * time_cutoff(s / top)).collect();
    let p = |t: f64| heat_kernel(&lat, 4.0, t).unwrap().values;
    let n = lat.num_sites();
    let dot3 = |a: &[f64], b: &[f64], c: &[f64]| (0..n).map(|u| a[u] * b[u] * c[u]).sum::<f64>();
    let (mut s22, mut s23) = (0.0, 0.0);
    for (i1, &t1) in rule.nodes.iter().enumerate() {
        for (i2, &t2) in rule.nodes.iter().enumerate() {
            let q2 = p(t2);
            for (i3, &t3) in rule.nodes.iter().enumerate() {
                let w = cw[i1] * cw[i2] * cw[i3];
                s22 += w * dot3(&q2, &p(t2 + 2.0 * t3), &p(2.0 * t1 + t2));
                s23 += w * time_cutoff(t2 / top) * dot3(&q2, &q2, &p(2.0 * t1 + t2 + 2.0 * t3));
            }
        }
    }
    let k2 = bernoulli_cumulant(2, rho);
    let pref = k2 * k2 * 2f64.powi((2 * dim as i32 - 6) * level as i32);
    let cn = compute_cn(level, dim, rho, quad()).unwrap();
    let mut ct = 0.0;
    for (i1, &t1) in rule.nodes.iter().enumerate() {
        for (i3, &t3) in rule.nodes.iter().enumerate() {
            ct += cw[i1] * cw[i3] * p(2.0 * (t1 + t3))[0];
        }
    }
    let want23 = pref * s23 - cn * k2 * 2f64.powi((dim as i32 - 4) * level as i32) * ct;
    let (_, c22, c23) = compute_cn2_parts(level, dim, rho, quad(), C21Method::Skip).unwrap();
    assert!((c22 - pref * s22).abs() < 1e-10 * c22.abs(), "{c22} vs {}", pref * s22);
    assert!((c23 - want23).abs() < 1e-10 * c23.abs().max(1e-12), "{c23} vs {want23}");
}

#[test]
fn exact_and_monte_carlo_fourth_order_agree() {
    let (level, dim, rho) = (3u32, 1usize, 0.5);
    let (exact, _, _) = compute_cn2_parts(level, dim, rho, quad(), C21Method::Exact).unwrap();
    let (mc, _, _) =
        compute_cn2_parts(level, dim, rho, quad(), C21Method::MonteCarlo { samples: 40_000, seed: 3 }).unwrap();
    let se = mc.std_error.unwrap();
    assert!((mc.value - exact.value).abs() < 4.0 * se + 1e-12, "{mc:?} vs {exact:?}");
}

#[test]
fn constants_are_nonnegative_and_vanish_at_extremes() {
    for rho in [0.1, 0.5, 0.9] {
        assert!(compute_cn(3, 3, rho, quad()).unwrap() > 0.0);
    }
    for rho in [0.0, 1.0] {
        let r = renorm_report(3, 3, rho, quad(), C21Method::MonteCarlo { samples: 1000, seed: 1 }).unwrap();
        assert_eq!((r.c_n, r.c_n1, r.c_n21, r.c_n22, r.c_n23, r.total), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }
}

#[test]
fn third_order_constant_changes_sign_at_half() {
    let lo = compute_cn1(3, 3, 0.3, quad()).unwrap();
    let hi = compute_cn1(3, 3, 0.7, quad()).unwrap();
    assert!(lo > 0.0 && hi < 0.0 && (lo + hi).abs() < 1e-14);
}

#[test]
fn quadrature_refinement_is_stable() {
    for level in [2, 3, 4] {
        let rel = quadrature_stability(level, 3, 0.3, quad()).unwrap();
        assert!(rel.iter().all(|&r| r < 5e-3), "N={level}: {rel:?}");
    }
}

#[test]
fn renormalized_kernel_integrates_to_zero() {
    for level in [2, 3] {
        let q = renormalized_kernel_q(level, 3, 0.5, quad()).unwrap();
        let cn = compute_cn(level, 3, 0.5, quad()).unwrap();
        assert!(q.integral().abs() < 1e-12 * cn);
        assert!(kernel_order(&q.smooth, 6.0).is_finite());
        let lat = &q.smooth.lattice;
        let i = q.smooth.times.len() / 2;
        let t = q.smooth.times[i];
        let dn = 2f64.powi(3 * level as i32);
        let p = heat_kernel(lat, 6.0, t * 4f64.powi(level as i32)).unwrap();
        let x = lat.num_sites() / 3;
        let want = time_cutoff(t) * dn * p.at(x) * 0.25 * dn * p.at(x);
        assert!((q.smooth.slice(i)[x] - want).abs() < 1e-12 * want.abs().max(1e-300));
    }
}

#[test]
fn golden_table_is_reproduced() {
    let bad = check_golden(GOLDEN_TABLE).unwrap();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn tampered_golden_table_is_named() {
    let tampered = GOLDEN_TABLE.replacen("2.671398167999e-2", "2.671399167999e-2", 1);
    assert_ne!(tampered, GOLDEN_TABLE);
    let bad = check_golden(&tampered).unwrap();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].column, "c_N22");
    assert_eq!(bad[0].row, 2);
}
