//! Heat kernels of the simple random walk on tori, decay-order certificates,
//! spatial convolution, and the Gaussian-type transition bound for labelled
//! exclusion.
//!
//! The walk with total jump rate `r` moves along each of the `2d` directions at
//! rate `r / 2d`, so its kernel factorizes over coordinates into ring kernels
//! `q_t(u) = L^{-1} sum_k exp(-t r/(2d) * 2(1 - cos(2 pi k / L))) cos(2 pi k u / L)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exclusion::LabelledChain;
use crate::lattice::TorusLattice;

/// Sides above this use an FFT for the ring kernel.
const DIRECT_SUM_MAX_SIDE: usize = 64;

/// Eigenvalues `2(1 - cos(2 pi k / L))` of minus the ring Laplacian.
pub fn ring_eigenvalues(side: usize) -> Vec<f64> {
    (0..side)
        .map(|k| 2.0 * (1.0 - (2.0 * PI * k as f64 / side as f64).cos()))
        .collect()
}

/// One-dimensional ring kernel `q_t(u)`, `u = 0..L`, for a walk jumping to
/// each neighbour at rate `edge_rate`.
pub fn ring_kernel(side: usize, edge_rate: f64, t: f64) -> Vec<f64> {
    let lam = ring_eigenvalues(side);
    let decay: Vec<f64> = lam.iter().map(|l| (-t * edge_rate * l).exp()).collect();
    let inv = 1.0 / side as f64;
    if side <= DIRECT_SUM_MAX_SIDE {
        let cos: Vec<f64> = (0..side).map(|m| (2.0 * PI * m as f64 / side as f64).cos()).collect();
        (0..side)
            .map(|u| {
                let s: f64 = decay
                    .iter()
                    .enumerate()
                    .map(|(k, e)| e * cos[(k * u) % side])
                    .sum();
                (s * inv).max(0.0)
            })
            .collect()
    } else {
        let mut buf: Vec<Complex<f64>> = decay.iter().map(|&e| Complex::new(e, 0.0)).collect();
        FftPlanner::new().plan_fft_inverse(side).process(&mut buf);
        buf.iter().map(|c| (c.re * inv).max(0.0)).collect()
    }
}

/// Site-indexed kernel `p_t(x)` for displacement `x` (site index relative to
/// the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernel {
    pub lattice: TorusLattice,
    pub values: Vec<f64>,
}

impl SpatialKernel {
    pub fn at(&self, site: usize) -> f64 {
        self.values[site]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Expand a ring kernel into the product kernel on the `d`-torus.
pub(crate) fn product_kernel(lattice: &TorusLattice, q: &[f64]) -> Vec<f64> {
    (0..lattice.num_sites())
        .map(|x| (0..lattice.dim()).map(|a| q[lattice.coord(x, a)]).product())
        .collect()
}

/// Transition probabilities of the walk with total jump rate
/// `total_jump_rate` after time `t`.
pub fn heat_kernel(lattice: &TorusLattice, total_jump_rate: f64, t: f64) -> Result<SpatialKernel> {
    if t < 0.0 || !t.is_finite() {
        return domain(format!("time must be nonnegative, got {t}"));
    }
    let edge_rate = total_jump_rate / (2.0 * lattice.dim() as f64);
    let q = ring_kernel(lattice.side(), edge_rate, t);
    Ok(SpatialKernel { lattice: lattice.clone(), values: product_kernel(lattice, &q) })
}

/// Space-time kernel tabulated on a time grid over every site of a
/// dyadic torus. Spatial arguments are displacements from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub lattice: TorusLattice,
    pub level: u32,
    pub times: Vec<f64>,
    /// Row-major: `values[i * sites + x]` is the value at `(times[i], x)`.
    pub values: Vec<f64>,
    pub claimed_order: Option<f64>,
}

impl KernelGrid {
    pub fn new(lattice: &TorusLattice, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let level = lattice.require_level()?;
        if values.len() != times.len() * lattice.num_sites() {
            return domain("kernel values do not match grid size");
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return domain("kernel time grid must be strictly increasing");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("kernel contains non-finite values".into()));
        }
        Ok(Self { lattice: lattice.clone(), level, times, values, claimed_order: None })
    }

    /// `2^{zeta N} p^N_t(x)` with `p^N` the walk jumping at total rate
    /// `2d 4^N` on the torus (so `t` is macroscopic time).
    pub fn rescaled_heat(lattice: &TorusLattice, zeta: f64, times: Vec<f64>) -> Result<Self> {
        let n = lattice.require_level()?;
        let scale = 2f64.powf(zeta * n as f64);
        let edge_rate = 4f64.powi(n as i32);
        let mut values = Vec::with_capacity(times.len() * lattice.num_sites());
        for &t in &times {
            let q = ring_kernel(lattice.side(), edge_rate, t);
            values.extend(product_kernel(lattice, &q).into_iter().map(|v| v * scale));
        }
        let mut g = Self::new(lattice, times, values)?;
        g.claimed_order = Some(zeta);
        Ok(g)
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let n = self.lattice.num_sites();
        &self.values[i * n..(i + 1) * n]
    }

    /// CSV rows `t, x_1..x_d, value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for a in 0..self.lattice.dim() {
            out.push_str(&format!(",x_{}", a + 1));
        }
        out.push_str(",value\n");
        for (i, &t) in self.times.iter().enumerate() {
            for (x, v) in self.slice(i).iter().enumerate() {
                out.push_str(&format!("{t:e}"));
                for c in self.lattice.coords(x) {
                    out.push_str(&format!(",{c}"));
                }
                out.push_str(&format!(",{v:e}\n"));
            }
        }
        out
    }
}

/// Rescaled Euclidean norm of the minimal image of `x`.
fn rescaled_norm(lattice: &TorusLattice, x: usize) -> f64 {
    lattice.euclidean_distance_idx(x, 0) * lattice.spacing()
}

/// `sup_{(t, x) in grid} (sqrt|t| + |x| + 2^{-N})^zeta |p_t(x)|`.
pub fn kernel_order(kernel: &KernelGrid, zeta: f64) -> f64 {
    let floor = 2f64.powi(-(kernel.level as i32));
    let norms: Vec<f64> = (0..kernel.lattice.num_sites())
        .map(|x| rescaled_norm(&kernel.lattice, x))
        .collect();
    let mut best = 0.0f64;
    for (i, &t) in kernel.times.iter().enumerate() {
        let st = t.abs().sqrt();
        for (x, &v) in kernel.slice(i).iter().enumerate() {
            if v != 0.0 {
                best = best.max((st + norms[x] + floor).powf(zeta) * v.abs());
            }
        }
    }
    best
}

/// Normalized spatial convolution
/// `2^{-dN} sum_y p1_{t1}(x - y) p2_{t2}(y)` for each index pair
/// `(i1, i2)`, tabulated at time `t1 + t2`.
pub fn convolve_kernels(p1: &KernelGrid, p2: &KernelGrid, pairs: &[(usize, usize)]) -> Result<KernelGrid> {
    if p1.lattice != p2.lattice {
        return Err(Error::LatticeMismatch("convolution of kernels on different tori".into()));
    }
    let lat = &p1.lattice;
    let n = lat.num_sites();
    let w = lat.spacing().powi(lat.dim() as i32);
    let diff: Vec<usize> = (0..n * n).map(|k| lat.sub(k / n, k % n)).collect();
    let mut times = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len() * n);
    for &(i1, i2) in pairs {
        if i1 >= p1.times.len() || i2 >= p2.times.len() {
            return domain("time index out of range");
        }
        times.push(p1.times[i1] + p2.times[i2]);
        let (a, b) = (p1.slice(i1), p2.slice(i2));
        for x in 0..n {
            let s: f64 = (0..n).map(|y| a[diff[x * n + y]] * b[y]).sum();
            values.push(w * s);
        }
    }
    let mut g = KernelGrid::new(lat, times, values)?;
    if let (Some(z1), Some(z2)) = (p1.claimed_order, p2.claimed_order) {
        g.claimed_order = Some(z1 + z2 - lat.dim() as f64);
    }
    Ok(g)
}

/// `Phi(u) = sup_w { u w - w^2 cosh w }` for `u >= 0`.
///
/// The objective is strictly concave with maximiser in `[0, u/2]`; golden
/// section brackets it and Newton steps polish to about `1e-12`.
pub fn legendre_phi(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let g = |w: f64| u * w - w * w * w.cosh();
    let (mut a, mut b) = (0.0f64, 0.5 * u);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    while (b - a) > 1e-10 * (1.0 + b) {
        if g(c) > g(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - ratio * (b - a);
        d = a + ratio * (b - a);
    }
    let mut w = 0.5 * (a + b);
    for _ in 0..4 {
        let d1 = u - 2.0 * w * w.cosh() - w * w * w.sinh();
        let d2 = -(2.0 * w.cosh() + 4.0 * w * w.sinh() + w * w * w.cosh());
        let step = d1 / d2;
        if !step.is_finite() {
            break;
        }
        w -= step;
    }
    g(w)
}

/// Which side of the threshold `C1` the time falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundBranch {
    SmallTime,
    LargeTime,
}

/// Outcome of [`gaussian_bound_check`]: the worst ratio of the transition
/// probability to each branch of the bound, and the branch selected by `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBoundReport {
    pub t: f64,
    pub selected: BoundBranch,
    pub small_time_ratio: f64,
    pub large_time_ratio: f64,
    /// Tuples `(x, y)` attaining the selected ratio.
    pub argmax: (Vec<usize>, Vec<usize>),
}

impl GaussianBoundReport {
    pub fn ratio(&self) -> f64 {
        match self.selected {
            BoundBranch::SmallTime => self.small_time_ratio,
            BoundBranch::LargeTime => self.large_time_ratio,
        }
    }
}

/// Periodized `sum_{m in Z} exp(-|u + m L|)` for one coordinate.
fn periodic_exponential(u: usize, side: usize) -> f64 {
    let (u, l) = (u as f64, side as f64);
    ((-u).exp() + (-(l - u)).exp()) / (1.0 - (-l).exp())
}

/// Large-time profile summed over periodic images of the displacement `v`.
fn large_time_profile(v: &[i64], side: usize, t: f64, labels: usize, c2: f64) -> f64 {
    let d = v.len();
    let log_t = t.max(std::f64::consts::E).ln();
    let pref = c2 * t / (2.0 * labels as f64 * log_t * log_t);
    let scale = log_t / (c2 * c2 * t);
    let l = side as i64;
    let term = |shift: &[i64]| {
        let norm: f64 = v.iter().zip(shift).map(|(&a, &m)| (a + m * l).unsigned_abs() as f64).sum();
        (-pref * legendre_phi(norm * scale)).exp()
    };
    let mut total = 0.0;
    let mut radius = 0i64;
    loop {
        let mut shell = 0.0;
        let mut shift = vec![-radius; d];
        loop {
            if shift.iter().any(|m| m.abs() == radius) {
                shell += term(&shift);
            }
            let mut k = 0;
            while k < d {
                shift[k] += 1;
                if shift[k] <= radius {
                    break;
                }
                shift[k] = -radius;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        total += shell;
        if shell <= 1e-16 * total || radius >= 64 {
            break;
        }
        radius += 1;
    }
    (1.0 + t).powf(-(d as f64) / 2.0) * total
}

/// Ratio of exact labelled transition probabilities to the product bound
/// `C1 prod_i pbar_t(x_i, y_i)` over every pair of tuples in the chain.
pub fn gaussian_bound_check(chain: &LabelledChain, t: f64, c1: f64, c2: f64) -> Result<GaussianBoundReport> {
    if !(c1 > 0.0 && c2 > 0.0) {
        return domain("bound constants must be positive");
    }
    let lat = chain.lattice();
    let k = chain.labels();
    let matrix = chain.transition_matrix(t)?;
    let states = chain.states();
    let selected = if t <= c1 { BoundBranch::SmallTime } else { BoundBranch::LargeTime };
    let mut small = 0.0f64;
    let mut large = 0.0f64;
    let mut argmax = (states[0].clone(), states[0].clone());
    let mut best_sel = -1.0;
    for (i, x) in states.iter().enumerate() {
        for (j, y) in states.iter().enumerate() {
            let p = matrix[(i, j)].max(0.0);
            let mut bs = c1;
            let mut bl = c1;
            for (&xi, &yi) in x.iter().zip(y) {
                let disp = lat.displacement(xi, yi);
                for &v in &disp {
                    bs *= periodic_exponential(v.rem_euclid(lat.side() as i64) as usize, lat.side());
                }
                bl *= large_time_profile(&disp, lat.side(), t, k, c2);
            }
            let (rs, rl) = (p / bs, p / bl);
            small = small.max(rs);
            large = large.max(rl);
            let sel = if selected == BoundBranch::SmallTime { rs } else { rl };
            if sel > best_sel {
                best_sel = sel;
                argmax = (x.clone(), y.clone());
            }
        }
    }
    Ok(GaussianBoundReport { t, selected, small_time_ratio: small, large_time_ratio: large, argmax })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring4_closed_form() {
        let lat = TorusLattice::dyadic(1, 2).unwrap();
        let p = heat_kernel(&lat, 2.0, 0.5).unwrap();
        let expect = (1.0 + 2.0 * (-1f64).exp() + (-2f64).exp()) / 4.0;
        assert!((p.at(0) - expect).abs() < 1e-14);
    }

    #[test]
    fn point_mass_at_zero_time() {
        let lat = TorusLattice::dyadic(2, 3).unwrap();
        let p = heat_kernel(&lat, 4.0, 0.0).unwrap();
        assert!((p.at(0) - 1.0).abs() < 1e-14);
        assert!(p.values[1..].iter().all(|v| v.abs() < 1e-14));
        assert!(heat_kernel(&lat, 4.0, -1.0).is_err());
    }

    #[test]
    fn fft_route_matches_direct_sum() {
        let t = 3.7;
        let direct: Vec<f64> = {
            let lam = ring_eigenvalues(128);
            (0..128)
                .map(|u| {
                    lam.iter()
                        .enumerate()
                        .map(|(k, l)| (-t * l).exp() * (2.0 * PI * (k * u) as f64 / 128.0).cos())
                        .sum::<f64>()
                        / 128.0
                })
                .collect()
        };
        let fft = ring_kernel(128, 1.0, t);
        for (a, b) in direct.iter().zip(&fft) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn phi_limits() {
        assert_eq!(legendre_phi(0.0), 0.0);
        for u in [1e-3, 1e-4] {
            assert!((legendre_phi(u) / (u * u) - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_kernel_has_zero_order_constant() {
        let lat = TorusLattice::dyadic(1, 3).unwrap();
        let g = KernelGrid::new(&lat, vec![0.0, 1.0], vec![0.0; 16]).unwrap();
        assert_eq!(kernel_order(&g, 1.0), 0.0);
    }
}
