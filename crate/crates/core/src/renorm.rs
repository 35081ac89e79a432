//! Renormalization constants of the exclusion-driven parabolic Anderson
//! model and their divergence rates.
//!
//! The space-time kernel is realized as
//! `K^N(t, x) = chi(t) 2^{dN} p_{4^N t}(2^N x)` for `t >= 0`, with `p` the
//! unit-rate-per-edge walk kernel and `chi` a smooth cutoff equal to one on
//! `[0, 1/2]` and vanishing beyond `1`. The two-point function of the
//! rescaled noise is `kappa_2(rho) 2^{dN} p_{4^N |t|}(2^N x)`.
//!
//! After the substitution `s = 4^N t` every constant becomes a low-dimensional
//! integral over microscopic times in `[0, 4^N]` of sums of products of heat
//! kernels. Those sums collapse by Chapman-Kolmogorov and, because the torus
//! kernel is a product of ring kernels, reduce to the `d`-th power of a
//! one-dimensional periodic sum:
//!
//! * `c_N = kappa_2 2^{(d-2)N} I_N`, `I_N = int chi(s) p_{2s}(0) ds`;
//! * `c_N^(1) = kappa_3 2^{(3d/2-4)N} I_N^2`;
//! * `c_N^(2,2) = kappa_2^2 2^{(2d-6)N} int chi1 chi2 chi3 sum_u p_{s2}(u) p_{s2+2s3}(u) p_{2s1+s2}(u)`;
//! * `c_N^(2,3) = kappa_2^2 2^{(2d-6)N} int chi1 chi2^2 chi3 sum_u p_{s2}(u)^2 p_{2s1+s2+2s3}(u)
//!   - c_N kappa_2 2^{(d-4)N} int chi1 chi3 p_{2(s1+s3)}(0)`;
//! * `c_N^(2,1) = 2^{(2d-6)N} (kappa_4 I_N^3 + kappa_2^2 (II + III))`, where the
//!   last two terms involve the connected two-particle kernel.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cumulants::{bernoulli_cumulant, TransitionTables};
use crate::error::{domain, Result};
use crate::kernels::{product_kernel, ring_eigenvalues, ring_kernel, KernelGrid};
use crate::lattice::TorusLattice;
use crate::quadrature::GaussRule;
use crate::rng::{streams, substream, task_rng};

/// Smooth cutoff: one on `[0, 1/2]`, zero on `[1, inf)`, `C^infinity` between.
pub fn time_cutoff(t: f64) -> f64 {
    if t <= 0.5 {
        return 1.0;
    }
    if t >= 1.0 {
        return 0.0;
    }
    let f = |u: f64| if u <= 0.0 { 0.0 } else { (-1.0 / u).exp() };
    let u = 2.0 * (1.0 - t);
    f(u) / (f(u) + f(1.0 - u))
}

/// Time quadrature settings: Gauss-Legendre with `order` nodes on each of
/// `subdivisions` pieces of every dyadic panel of `[0, 4^N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenormQuadrature {
    pub order: usize,
    pub subdivisions: usize,
}

impl Default for RenormQuadrature {
    fn default() -> Self {
        Self { order: 8, subdivisions: 1 }
    }
}

impl RenormQuadrature {
    /// The same rule with every panel split twice as finely.
    pub fn refined(self) -> Self {
        Self { subdivisions: 2 * self.subdivisions, ..self }
    }
}

/// Per-level tables: quadrature nodes in microscopic time, weights times
/// the cutoff, and ring-mode decay factors `exp(-s lambda_k)`.
struct Tables {
    side: usize,
    nodes: Vec<f64>,
    /// `w_i chi(s_i / 4^N)`
    cw: Vec<f64>,
    chi: Vec<f64>,
    /// `decay[i][k] = exp(-s_i lambda_k)`
    decay: Vec<Vec<f64>>,
}

impl Tables {
    fn new(level: u32, quad: RenormQuadrature) -> Self {
        let side = 1usize << level;
        let rule = GaussRule::dyadic(2 * level, quad.subdivisions, quad.order);
        let scale = 4f64.powi(level as i32);
        let lambda = ring_eigenvalues(side);
        let chi: Vec<f64> = rule.nodes.iter().map(|&s| time_cutoff(s / scale)).collect();
        let cw = rule.weights.iter().zip(&chi).map(|(w, c)| w * c).collect();
        let decay = rule
            .nodes
            .iter()
            .map(|&s| lambda.iter().map(|l| (-s * l).exp()).collect())
            .collect();
        Self { side, nodes: rule.nodes, cw, chi, decay }
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    /// One-dimensional `q_{sum_j m_j s_j}(0)` from a product of decay powers.
    fn return_probability(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.side).map(f).sum::<f64>() / self.side as f64
    }
}

/// `I_N = int_0^{4^N} chi(s / 4^N) p_{2s}(0) ds` in dimension `d`.
fn green_integral(t: &Tables, dim: i32) -> f64 {
    (0..t.len())
        .map(|i| {
            let e = &t.decay[i];
            t.cw[i] * t.return_probability(|k| e[k] * e[k]).powi(dim)
        })
        .sum()
}

fn check_inputs(level: u32, dim: usize, rho: f64) -> Result<()> {
    if level < 2 {
        return domain("renormalization constants need N >= 2");
    }
    if !(1..=3).contains(&dim) {
        return domain(format!("dimension {dim} unsupported (1..=3)"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return domain(format!("density {rho} outside [0, 1]"));
    }
    Ok(())
}

/// `c_N`.
pub fn compute_cn(level: u32, dim: usize, rho: f64, quad: RenormQuadrature) -> Result<f64> {
    check_inputs(level, dim, rho)?;
    let t = Tables::new(level, quad);
    Ok(cn_from(&t, level, dim, rho))
}

fn cn_from(t: &Tables, level: u32, dim: usize, rho: f64) -> f64 {
    let k2 = bernoulli_cumulant(2, rho);
    k2 * 2f64.powi((dim as i32 - 2) * level as i32) * green_integral(t, dim as i32)
}

/// `c_N^(1)`.
pub fn compute_cn1(level: u32, dim: usize, rho: f64, quad: RenormQuadrature) -> Result<f64> {
    check_inputs(level, dim, rho)?;
    let t = Tables::new(level, quad);
    Ok(cn1_from(&t, level, dim, rho))
}

fn cn1_from(t: &Tables, level: u32, dim: usize, rho: f64) -> f64 {
    let k3 = bernoulli_cumulant(3, rho);
    let i = green_integral(t, dim as i32);
    k3 * 2f64.powf((1.5 * dim as f64 - 4.0) * level as f64) * i * i
}

/// Cosine transform `w_k = sum_u g(u) cos(2 pi k u / L)`.
fn cosine_transform(g: &[f64], cos: &[f64]) -> Vec<f64> {
    let l = g.len();
    (0..l)
        .map(|k| g.iter().enumerate().map(|(u, gu)| gu * cos[(k * u) % l]).sum())
        .collect()
}

/// Ring kernel at time `s` from its mode decay factors.
fn ring_from_modes(modes: &[f64], cos: &[f64]) -> Vec<f64> {
    let l = modes.len();
    (0..l)
        .map(|u| modes.iter().enumerate().map(|(k, m)| m * cos[(k * u) % l]).sum::<f64>() / l as f64)
        .collect()
}

fn cos_table(side: usize) -> Vec<f64> {
    (0..side).map(|m| (2.0 * PI * m as f64 / side as f64).cos()).collect()
}

/// `c_N^(2,2)` and `c_N^(2,3)` (both deterministic).
fn cn22_cn23_from(t: &Tables, level: u32, dim: usize, rho: f64, cn: f64) -> (f64, f64) {
    let k2 = bernoulli_cumulant(2, rho);
    let n = t.len();
    let l = t.side;
    let cos = cos_table(l);
    let d = dim as i32;
    let inv_l = 1.0 / l as f64;
    let mut c22 = 0.0;
    let mut c23 = 0.0;
    for i2 in 0..n {
        if t.cw[i2] == 0.0 {
            continue;
        }
        let e2 = &t.decay[i2];
        let q2 = ring_from_modes(e2, &cos);
        // c23 first term: sum_u q_{s2}(u)^2 q_{s2 + 2 s1 + 2 s3}(u)
        let sq: Vec<f64> = q2.iter().map(|v| v * v).collect();
        let w_sq = cosine_transform(&sq, &cos);
        let base: Vec<f64> = w_sq.iter().zip(e2).map(|(w, e)| w * e).collect();
        let mut acc23 = 0.0;
        for i1 in 0..n {
            if t.cw[i1] == 0.0 {
                continue;
            }
            let e1 = &t.decay[i1];
            let b1: Vec<f64> = base.iter().zip(e1).map(|(b, e)| b * e * e).collect();
            let mut inner = 0.0;
            for i3 in 0..n {
                if t.cw[i3] == 0.0 {
                    continue;
                }
                let e3 = &t.decay[i3];
                let s: f64 = b1.iter().zip(e3).map(|(b, e)| b * e * e).sum::<f64>() * inv_l;
                inner += t.cw[i3] * s.powi(d);
            }
            acc23 += t.cw[i1] * inner;
        }
        c23 += t.cw[i2] * t.chi[i2] * acc23;

        // c22: sum_u q_{s2}(u) q_{s2 + 2 s3}(u) q_{2 s1 + s2}(u)
        let mut acc22 = 0.0;
        for i3 in 0..n {
            if t.cw[i3] == 0.0 {
                continue;
            }
            let e3 = &t.decay[i3];
            let modes: Vec<f64> = e2.iter().zip(e3).map(|(a, b)| a * b * b).collect();
            let q23 = ring_from_modes(&modes, &cos);
            let g: Vec<f64> = q2.iter().zip(&q23).map(|(a, b)| a * b).collect();
            let w = cosine_transform(&g, &cos);
            let wb: Vec<f64> = w.iter().zip(e2).map(|(w, e)| w * e).collect();
            let mut inner = 0.0;
            for i1 in 0..n {
                if t.cw[i1] == 0.0 {
                    continue;
                }
                let e1 = &t.decay[i1];
                let s: f64 = wb.iter().zip(e1).map(|(w, e)| w * e * e).sum::<f64>() * inv_l;
                inner += t.cw[i1] * s.powi(d);
            }
            acc22 += t.cw[i3] * inner;
        }
        c22 += t.cw[i2] * acc22;
    }
    let pref = k2 * k2 * 2f64.powi((2 * d - 6) * level as i32);
    // counterterm: c_N kappa_2 2^{(d-4)N} int chi1 chi3 p_{2(s1+s3)}(0)
    let mut ct = 0.0;
    for i1 in 0..n {
        for i3 in 0..n {
            let (e1, e3) = (&t.decay[i1], &t.decay[i3]);
            let r = t.return_probability(|k| e1[k] * e1[k] * e3[k] * e3[k]);
            ct += t.cw[i1] * t.cw[i3] * r.powi(d);
        }
    }
    let counter = cn * k2 * 2f64.powi((d - 4) * level as i32) * ct;
    (pref * c22, pref * c23 - counter)
}

/// How `c_N^(2,1)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum C21Method {
    /// Exact connected kernels from the two-particle labelled chain.
    Exact,
    /// Coupled stirring/independent pairs; `samples` draws under `seed`.
    MonteCarlo { samples: usize, seed: u64 },
    /// Not evaluated; reported as zero and excluded from `C_N`.
    Skip,
}

/// `c_N^(2,1)` value with an optional Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C21Value {
    pub value: f64,
    pub std_error: Option<f64>,
    pub included: bool,
}

/// Site-indexed kernel `p_s(x)` on the `d`-torus from ring modes.
fn torus_kernel(lattice: &TorusLattice, modes: &[f64], cos: &[f64]) -> Vec<f64> {
    product_kernel(lattice, &ring_from_modes(modes, cos))
}

/// `A(x1, y1) = int chi(s) p_s(x1) p_s(y1) ds` and `B(v) = int chi(s) p_{2s}(v) ds`.
fn c21_weights(t: &Tables, lattice: &TorusLattice, cos: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = lattice.num_sites();
    let mut a = vec![0.0; s * s];
    let mut b = vec![0.0; s];
    for i in 0..t.len() {
        if t.cw[i] == 0.0 {
            continue;
        }
        let p = torus_kernel(lattice, &t.decay[i], cos);
        for x in 0..s {
            let px = t.cw[i] * p[x];
            for y in 0..s {
                a[x * s + y] += px * p[y];
            }
        }
        let sq: Vec<f64> = t.decay[i].iter().map(|e| e * e).collect();
        let p2 = torus_kernel(lattice, &sq, cos);
        for v in 0..s {
            b[v] += t.cw[i] * p2[v];
        }
    }
    (a, b)
}

/// `II + III` with exact connected kernels.
fn c21_pairs_exact(t: &Tables, lattice: &TorusLattice) -> Result<f64> {
    let cos = cos_table(t.side);
    let (a, b) = c21_weights(t, lattice, &cos);
    let s = lattice.num_sites();
    let mut tables = TransitionTables::new(lattice);
    let mut total = 0.0;
    for i in 0..t.len() {
        if t.cw[i] == 0.0 {
            continue;
        }
        let p = torus_kernel(lattice, &t.decay[i], &cos);
        let c = tables.connected_kernel(2, t.nodes[i])?;
        let w = s * s;
        let mut acc = 0.0;
        for x2 in 0..s {
            for y2 in 0..s {
                let bv = b[lattice.sub(x2, y2)];
                let row = &c[(y2 * s + x2) * w..(y2 * s + x2 + 1) * w];
                for x1 in 0..s {
                    let px = p[lattice.sub(x1, x2)];
                    for y1 in 0..s {
                        // II: (y2, x2) -> (y1, x1); III: (y2, x2) -> (x1, y1)
                        let cc = row[y1 * s + x1] + row[x1 * s + y1];
                        acc += a[x1 * s + y1] * px * bv * cc;
                    }
                }
            }
        }
        total += t.cw[i] * acc;
    }
    Ok(total)
}

/// Cumulative distribution over a discrete weight vector.
fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v.max(0.0);
            acc
        })
        .collect()
}

fn draw<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>() * cdf.last().copied().unwrap_or(0.0);
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Coupled evolution over time `horizon` of a stirring pair from `(x, y)`
/// and an independent pair from the same sites. Each particle carries one
/// rate-1 clock per direction; in the stirring pair the clock of the first
/// particle pointing at the second swaps them, the reverse clock is
/// suppressed, and coinciding particles move together on the first
/// particle's clocks.
fn coupled_pairs<R: Rng>(
    lattice: &TorusLattice,
    x: usize,
    y: usize,
    horizon: f64,
    rng: &mut R,
) -> ((usize, usize), (usize, usize)) {
    let d = lattice.dim();
    let exp = Exp::new((4 * d) as f64).expect("positive rate");
    let (mut sx, mut sy) = (x, y);
    let (mut ix, mut iy) = (x, y);
    let mut t = exp.sample(rng);
    while t <= horizon {
        let k = rng.random_range(0..4 * d);
        let particle = k / (2 * d);
        let axis = (k % (2 * d)) / 2;
        let forward = k % 2 == 0;
        if particle == 0 {
            ix = lattice.shift(ix, axis, forward);
            let target = lattice.shift(sx, axis, forward);
            if sx == sy {
                sx = target;
                sy = target;
            } else if target == sy {
                sy = sx;
                sx = target;
            } else {
                sx = target;
            }
        } else {
            iy = lattice.shift(iy, axis, forward);
            if sx != sy {
                let target = lattice.shift(sy, axis, forward);
                if target != sx {
                    sy = target;
                }
            }
        }
        t += exp.sample(rng);
    }
    ((sx, sy), (ix, iy))
}

const C21_CHUNK: usize = 4096;

/// `II + III` by Monte Carlo; returns (estimate, standard error).
fn c21_pairs_mc(t: &Tables, lattice: &TorusLattice, samples: usize, seed: u64) -> (f64, f64) {
    use rayon::prelude::*;
    let cos = cos_table(t.side);
    let (a, b) = c21_weights(t, lattice, &cos);
    let s = lattice.num_sites();
    let kernels: Vec<Vec<f64>> = (0..t.len()).map(|i| torus_kernel(lattice, &t.decay[i], &cos)).collect();
    let node_cdf = cumulative(&t.cw);
    let shift_cdf = cumulative(&b);
    let norm = node_cdf.last().unwrap() * s as f64 * shift_cdf.last().unwrap();
    let f = |x1: usize, y1: usize, x2: usize, p: &[f64]| a[x1 * s + y1] * p[lattice.sub(x1, x2)];
    let chunks = samples.div_ceil(C21_CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = task_rng(seed, substream(streams::REPLICAS, c as u64));
            let todo = C21_CHUNK.min(samples - c * C21_CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..todo {
                let i = draw(&node_cdf, &mut rng);
                let x2 = rng.random_range(0..s);
                let v = draw(&shift_cdf, &mut rng);
                let y2 = lattice.sub(x2, v);
                let ((sx, sy), (ix, iy)) = coupled_pairs(lattice, x2, y2, t.nodes[i], &mut rng);
                let p = &kernels[i];
                let val = f(sx, sy, x2, p) + f(sy, sx, x2, p) - f(ix, iy, x2, p) - f(iy, ix, x2, p);
                s1 += val;
                s2 += val * val;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let m = samples as f64;
    let mean = s1 / m;
    let var = (s2 / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    (norm * mean, norm * (var / m).sqrt())
}

fn cn21_from(t: &Tables, level: u32, dim: usize, rho: f64, method: C21Method) -> Result<C21Value> {
    let k2 = bernoulli_cumulant(2, rho);
    let k4 = bernoulli_cumulant(4, rho);
    let pref = 2f64.powi((2 * dim as i32 - 6) * level as i32);
    let i = green_integral(t, dim as i32);
    let chain = k4 * i * i * i;
    let lattice = TorusLattice::dyadic(dim, level)?;
    Ok(match method {
        C21Method::Skip => C21Value { value: 0.0, std_error: None, included: false },
        C21Method::Exact => {
            let pairs = if k2 == 0.0 { 0.0 } else { c21_pairs_exact(t, &lattice)? };
            C21Value { value: pref * (chain + k2 * k2 * pairs), std_error: None, included: true }
        }
        C21Method::MonteCarlo { samples, seed } => {
            if k2 == 0.0 || samples == 0 {
                C21Value { value: pref * chain, std_error: Some(0.0), included: true }
            } else {
                let (est, se) = c21_pairs_mc(t, &lattice, samples, seed);
                C21Value {
                    value: pref * (chain + k2 * k2 * est),
                    std_error: Some(pref * k2 * k2 * se),
                    included: true,
                }
            }
        }
    })
}

/// `(c_N^(2,1), c_N^(2,2), c_N^(2,3))`.
pub fn compute_cn2_parts(
    level: u32,
    dim: usize,
    rho: f64,
    quad: RenormQuadrature,
    c21: C21Method,
) -> Result<(C21Value, f64, f64)> {
    check_inputs(level, dim, rho)?;
    let t = Tables::new(level, quad);
    let cn = cn_from(&t, level, dim, rho);
    let (c22, c23) = cn22_cn23_from(&t, level, dim, rho, cn);
    let c21v = cn21_from(&t, level, dim, rho, c21)?;
    let ci_too_wide = c21v.std_error.is_some_and(|se| se > 0.25 * c21v.value.abs().max(1e-12));
    if ci_too_wide {
        log::warn!("c_N^(2,1) Monte-Carlo error {:?} is large relative to {}", c21v.std_error, c21v.value);
    }
    Ok((c21v, c22, c23))
}

/// Every constant at one level, with normalized rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormReport {
    pub d: usize,
    pub n: u32,
    pub rho: f64,
    pub c_n: f64,
    pub c_n1: f64,
    pub c_n21: f64,
    /// Half-width of a 95% interval for Monte-Carlo `c_N^(2,1)`.
    pub c_n21_ci: Option<f64>,
    pub c_n21_included: bool,
    pub c_n22: f64,
    pub c_n23: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
    pub quadrature: RenormQuadrature,
    pub note: Option<String>,
}

/// Default evaluation of `c_N^(2,1)`: exact while the two-particle chain is
/// small, Monte Carlo up to `N = 3` in `d = 3`, skipped beyond.
pub fn default_c21_method(level: u32, dim: usize, seed: u64) -> C21Method {
    let sites = 1usize << (level as usize * dim);
    if sites * (sites - 1) <= crate::exclusion::DENSE_STATE_LIMIT {
        C21Method::Exact
    } else if dim == 3 && level <= 3 || dim < 3 && level <= 5 {
        C21Method::MonteCarlo { samples: 20_000, seed }
    } else {
        C21Method::Skip
    }
}

/// All constants at one level.
pub fn renorm_report(level: u32, dim: usize, rho: f64, quad: RenormQuadrature, c21: C21Method) -> Result<RenormReport> {
    check_inputs(level, dim, rho)?;
    let t = Tables::new(level, quad);
    let c_n = cn_from(&t, level, dim, rho);
    let c_n1 = cn1_from(&t, level, dim, rho);
    let (c_n22, c_n23) = cn22_cn23_from(&t, level, dim, rho, c_n);
    let c21v = cn21_from(&t, level, dim, rho, c21)?;
    let note = if c21v.included {
        None
    } else {
        Some(format!("c_N^(2,1) not evaluated at N = {level}, d = {dim}; C_N excludes it"))
    };
    let total = c_n + c_n1 + c21v.value + c_n22 + c_n23;
    Ok(RenormReport {
        d: dim,
        n: level,
        rho,
        c_n,
        c_n1,
        c_n21: c21v.value,
        c_n21_ci: c21v.std_error.map(|s| 1.96 * s),
        c_n21_included: c21v.included,
        c_n22,
        c_n23,
        alpha: c_n / 2f64.powi(level as i32),
        beta: c_n1 / 2f64.powf(level as f64 / 2.0),
        gamma: c_n22 / level as f64,
        total,
        quadrature: quad,
        note,
    })
}

/// `C_N = c_N + c_N^(1) + c_N^(2)` with the default `c_N^(2,1)` method.
pub fn total_cn(level: u32, dim: usize, rho: f64, seed: u64) -> Result<f64> {
    Ok(renorm_report(level, dim, rho, RenormQuadrature::default(), default_c21_method(level, dim, seed))?.total)
}

/// Relative change of each deterministic constant when the quadrature is
/// refined: `(c_N, c_N^(1), c_N^(2,2), c_N^(2,3))`.
pub fn quadrature_stability(level: u32, dim: usize, rho: f64, quad: RenormQuadrature) -> Result<[f64; 4]> {
    let a = renorm_report(level, dim, rho, quad, C21Method::Skip)?;
    let b = renorm_report(level, dim, rho, quad.refined(), C21Method::Skip)?;
    let rel = |x: f64, y: f64| if y == 0.0 { (x - y).abs() } else { ((x - y) / y).abs() };
    Ok([rel(a.c_n, b.c_n), rel(a.c_n1, b.c_n1), rel(a.c_n22, b.c_n22), rel(a.c_n23, b.c_n23)])
}

/// CSV header of the renorm table.
pub const RENORM_CSV_HEADER: &str =
    "d,N,rho,c_N,c_N1,c_N21,c_N21_ci,c_N22,c_N23,alpha_N,beta_N,gamma_N,C_N";

impl RenormReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.d,
            self.n,
            self.rho,
            self.c_n,
            self.c_n1,
            self.c_n21,
            self.c_n21_ci.map_or_else(|| if self.c_n21_included { "0".into() } else { "NA".into() }, |c| format!("{c:.6e}")),
            self.c_n22,
            self.c_n23,
            self.alpha,
            self.beta,
            self.gamma,
            self.total
        )
    }
}

/// The renormalized kernel `K^N(z) E_c(xi^N(0), xi^N(z)) - c_N 2^{dN} delta_0`:
/// the smooth part tabulated on the quadrature nodes (macroscopic times)
/// with its quadrature weights, plus the mass of the atom at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RenormalizedKernel {
    pub smooth: KernelGrid,
    pub weights: Vec<f64>,
    pub atom_mass: f64,
}

impl RenormalizedKernel {
    /// Semi-discrete integral against the constant function one.
    pub fn integral(&self) -> f64 {
        let lat = &self.smooth.lattice;
        let w = lat.spacing().powi(lat.dim() as i32);
        let smooth: f64 = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, wi)| wi * w * self.smooth.slice(i).iter().sum::<f64>())
            .sum();
        smooth + self.atom_mass
    }
}

pub fn renormalized_kernel_q(level: u32, dim: usize, rho: f64, quad: RenormQuadrature) -> Result<RenormalizedKernel> {
    check_inputs(level, dim, rho)?;
    let t = Tables::new(level, quad);
    let cn = cn_from(&t, level, dim, rho);
    let lattice = TorusLattice::dyadic(dim, level)?;
    let k2 = bernoulli_cumulant(2, rho);
    let scale = 4f64.powi(level as i32);
    let dn = 2f64.powi(dim as i32 * level as i32);
    let mut values = Vec::with_capacity(t.len() * lattice.num_sites());
    for i in 0..t.len() {
        let q = ring_kernel(t.side, 1.0, t.nodes[i]);
        let p = product_kernel(&lattice, &q);
        values.extend(p.iter().map(|v| t.chi[i] * dn * v * k2 * dn * v));
    }
    let times: Vec<f64> = t.nodes.iter().map(|s| s / scale).collect();
    let weights = GaussRule::dyadic(2 * level, quad.subdivisions, quad.order).weights.iter().map(|w| w / scale).collect();
    let smooth = KernelGrid::new(&lattice, times, values)?;
    Ok(RenormalizedKernel { smooth, weights, atom_mass: -cn })
}

/// Master seed used for every golden-table Monte-Carlo term.
pub const GOLDEN_SEED: u64 = 2024;

/// `(N, d, rho)` rows of the golden table.
pub const GOLDEN_CASES: [(u32, usize, f64); 3] = [(2, 3, 0.5), (3, 3, 0.5), (3, 3, 0.3)];

/// The golden table shipped with the crate.
pub const GOLDEN_TABLE: &str = include_str!("../data/golden_renorm.csv");

/// Regenerates the golden table.
pub fn golden_table() -> Result<String> {
    let mut out = String::from(RENORM_CSV_HEADER);
    out.push('\n');
    for (n, d, rho) in GOLDEN_CASES {
        let r = renorm_report(n, d, rho, RenormQuadrature::default(), default_c21_method(n, d, GOLDEN_SEED))?;
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    Ok(out)
}

/// One disagreement between a stored and a recomputed table entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenMismatch {
    pub row: usize,
    pub column: String,
    pub stored: String,
    pub computed: String,
}

/// Compares `stored` with a fresh computation. Numeric cells match when
/// their relative difference is below `1e-9`.
pub fn check_golden(stored: &str) -> Result<Vec<GoldenMismatch>> {
    let fresh = golden_table()?;
    let header: Vec<&str> = RENORM_CSV_HEADER.split(',').collect();
    let a: Vec<&str> = stored.lines().filter(|l| !l.trim().is_empty()).collect();
    let b: Vec<&str> = fresh.lines().collect();
    let mut out = Vec::new();
    if a.first() != b.first() {
        out.push(GoldenMismatch {
            row: 0,
            column: "header".into(),
            stored: a.first().unwrap_or(&"").to_string(),
            computed: b[0].to_string(),
        });
    }
    for row in 1..a.len().max(b.len()) {
        let (sa, sb) = (a.get(row).copied().unwrap_or(""), b.get(row).copied().unwrap_or(""));
        let ca: Vec<&str> = sa.split(',').collect();
        let cb: Vec<&str> = sb.split(',').collect();
        for (k, name) in header.iter().enumerate() {
            let (x, y) = (ca.get(k).copied().unwrap_or(""), cb.get(k).copied().unwrap_or(""));
            let same = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(u), Ok(v)) => (u - v).abs() <= 1e-9 * u.abs().max(v.abs()) || u == v,
                _ => x == y,
            };
            if !same {
                out.push(GoldenMismatch { row, column: name.to_string(), stored: x.into(), computed: y.into() });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_shape() {
        assert_eq!(time_cutoff(0.0), 1.0);
        assert_eq!(time_cutoff(0.5), 1.0);
        assert_eq!(time_cutoff(1.0), 0.0);
        assert!((time_cutoff(0.75) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 0..=100 {
            let v = time_cutoff(0.5 + k as f64 / 200.0);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn vanish_at_extreme_densities() {
        for rho in [0.0, 1.0] {
            let r = renorm_report(2, 3, rho, RenormQuadrature::default(), C21Method::Exact).unwrap_or_else(|_| {
                renorm_report(2, 3, rho, RenormQuadrature::default(), C21Method::Skip).unwrap()
            });
            assert_eq!(r.c_n, 0.0);
            assert_eq!(r.c_n1, 0.0);
            assert_eq!(r.c_n22, 0.0);
            assert_eq!(r.c_n23, 0.0);
            assert_eq!(r.total, 0.0);
        }
    }

    #[test]
    fn third_order_vanishes_at_half() {
        assert_eq!(compute_cn1(3, 3, 0.5, RenormQuadrature::default()).unwrap(), 0.0);
    }
}

#[cfg(test)]
mod mc_tests {
    use super::*;

    #[test]
    fn pair_monte_carlo_matches_exact_on_ring() {
        let quad = RenormQuadrature::default();
        let t = Tables::new(3, quad);
        let lat = TorusLattice::dyadic(1, 3).unwrap();
        let exact = c21_pairs_exact(&t, &lat).unwrap();
        let (est, se) = c21_pairs_mc(&t, &lat, 40_000, 11);
        assert!((est - exact).abs() < 4.0 * se + 1e-12, "{est} +- {se} vs {exact}");
    }
}
