//! Set partitions, joint cumulants and Wick products, and exact moment and
//! cumulant formulas for stationary exclusion.
//!
//! Subsets of a ground set `{0, .., n-1}` are encoded as bitmasks throughout;
//! oracle functions and result tables are indexed by mask.
//!
//! # Moment formula
//!
//! For observation points sorted by time, a partition `pi` groups points that
//! are visited by the same dual particle. Between consecutive observation
//! times the blocks that have already started and not yet finished (the
//! *straddling* blocks) follow stirring trajectories. A block is pinned to
//! its site at each of its own times and is free elsewhere. Two blocks that
//! meet on a site at an observation time share a trajectory from then on, so
//! tuple kernels with repeated sites act as the labelled chain on the
//! distinct sites. Weighting each partition by the product of Bernoulli
//! cumulants `kappa_{|B|}(rho)` gives the stationary moment.
//!
//! # Connected formula
//!
//! A contraction scheme additionally splits the straddling blocks of every
//! gap into bundles. Each bundle moves by the connected transition kernel
//! (the joint cumulant of the particles' indicator variables), independently
//! of the other bundles. Summing the connected schemes gives the joint
//! cumulant directly. A scheme is connected when its bundles link all blocks
//! together.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exclusion::LabelledChain;
use crate::lattice::{SpaceTimePoint, TorusLattice};
use crate::rng::{streams, substream, task_rng};

/// Largest ground set for partition enumeration.
pub const PARTITION_LIMIT: usize = 12;

/// A partition of `{0, .., n-1}` into nonempty blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SetPartition {
    pub n: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block masks.
    pub fn masks(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.iter().fold(0u32, |m, &i| m | 1 << i)).collect()
    }
}

/// All partitions of `{0, .., n-1}`, in lexicographic order of their
/// restricted growth strings.
pub fn enumerate_partitions(n: usize) -> Result<Vec<SetPartition>> {
    if n > PARTITION_LIMIT {
        return Err(Error::Capacity { what: "partition ground set", size: n, limit: PARTITION_LIMIT });
    }
    Ok(partitions_of(&(0..n).collect::<Vec<_>>())
        .into_iter()
        .map(|blocks| SetPartition { n, blocks })
        .collect())
}

/// All partitions of an arbitrary list of items (blocks keep input order).
pub fn partitions_of<T: Clone>(items: &[T]) -> Vec<Vec<Vec<T>>> {
    let n = items.len();
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; n];
    loop {
        let k = rgs.iter().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); k];
        for (i, &b) in rgs.iter().enumerate() {
            blocks[b].push(items[i].clone());
        }
        out.push(blocks);
        // next restricted growth string
        let mut i = n - 1;
        loop {
            if i == 0 {
                return out;
            }
            let prefix_max = rgs[..i].iter().copied().max().unwrap_or(0);
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                for r in rgs.iter_mut().skip(i + 1) {
                    *r = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

fn lowest_bit(mask: u32) -> u32 {
    mask & mask.wrapping_neg()
}

/// Iterate nonempty submasks of `mask` that contain its lowest element.
fn rooted_submasks(mask: u32) -> impl Iterator<Item = u32> {
    let root = lowest_bit(mask);
    let rest = mask ^ root;
    let mut sub = rest;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let out = sub | root;
        if sub == 0 {
            done = true;
        } else {
            sub = (sub - 1) & rest;
        }
        Some(out)
    })
}

/// Joint cumulants of every subset from joint moments of every subset.
/// `moments[mask]` is `E[prod_{i in mask} X_i]`; entry 0 is ignored.
pub fn moments_to_cumulants(n: usize, moments: &[f64]) -> Vec<f64> {
    let size = 1usize << n;
    let mut kappa = vec![0.0; size];
    for mask in 1..size as u32 {
        let mut k = moments[mask as usize];
        for s in rooted_submasks(mask) {
            if s != mask {
                k -= kappa[s as usize] * moments[(mask ^ s) as usize];
            }
        }
        kappa[mask as usize] = k;
    }
    kappa
}

/// Joint moments of every subset from joint cumulants (`moments[0] = 1`).
pub fn cumulants_to_moments(n: usize, cumulants: &[f64]) -> Vec<f64> {
    let size = 1usize << n;
    let mut m = vec![0.0; size];
    m[0] = 1.0;
    for mask in 1..size as u32 {
        m[mask as usize] = rooted_submasks(mask)
            .map(|s| cumulants[s as usize] * m[(mask ^ s) as usize])
            .sum();
    }
    m
}

/// Joint cumulant of the full set by the explicit partition sum
/// `sum_pi (|pi| - 1)! (-1)^{|pi| - 1} prod_B E[X_B]`.
pub fn cumulant_by_partitions(n: usize, moment: impl Fn(u32) -> f64) -> Result<f64> {
    let mut total = 0.0;
    for p in enumerate_partitions(n)? {
        let k = p.num_blocks();
        let coeff = (1..k).map(|i| i as f64).product::<f64>() * if k % 2 == 1 { 1.0 } else { -1.0 };
        total += coeff * p.masks().into_iter().map(&moment).product::<f64>();
    }
    Ok(total)
}

/// `kappa_p` of a Bernoulli(`q`) variable, from the inversion applied to the
/// constant moment sequence `E[X^k] = q`.
pub fn bernoulli_cumulant(order: usize, q: f64) -> f64 {
    if order == 0 {
        return 0.0;
    }
    let mut moments = vec![q; 1 << order];
    moments[0] = 1.0;
    moments_to_cumulants(order, &moments)[(1 << order) - 1]
}

/// Wick products `<X_S>` of every subset, given realized values `x` and the
/// joint cumulants of every subset. Uses
/// `X^A = sum_{B subset A} <X_B> E[X^{A \ B}]` with `<X_emptyset> = 1`.
pub fn wick_products(values: &[f64], cumulants: &[f64]) -> Vec<f64> {
    let n = values.len();
    let moments = cumulants_to_moments(n, cumulants);
    let size = 1usize << n;
    let mut w = vec![0.0; size];
    w[0] = 1.0;
    for mask in 1..size as u32 {
        let mut v: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| values[i]).product();
        let mut sub = (mask - 1) & mask;
        loop {
            v -= w[sub as usize] * moments[(mask ^ sub) as usize];
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & mask;
        }
        w[mask as usize] = v;
    }
    w
}

/// Wick product of the full set.
pub fn wick_product(values: &[f64], cumulants: &[f64]) -> f64 {
    *wick_products(values, cumulants).last().unwrap_or(&1.0)
}

/// Coefficients `c_B` with `<X_A> = sum_{B subset A} c_B X^B` for the full
/// set `A = {0..n-1}`, given the moments of every subset.
fn wick_polynomial(n: usize, moments: &[f64]) -> Vec<f64> {
    let size = 1usize << n;
    // poly[s] is the coefficient vector of <X_s>
    let mut poly: Vec<Vec<f64>> = vec![Vec::new(); size];
    poly[0] = vec![0.0; size];
    poly[0][0] = 1.0;
    for mask in 1..size as u32 {
        let mut c = vec![0.0; size];
        c[mask as usize] = 1.0;
        let mut sub = (mask - 1) & mask;
        loop {
            let m = moments[(mask ^ sub) as usize];
            for (ci, pi) in c.iter_mut().zip(&poly[sub as usize]) {
                *ci -= m * pi;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & mask;
        }
        poly[mask as usize] = c;
    }
    poly.pop().unwrap()
}

/// Largest `m * p` for the diagram formula check.
pub const DIAGRAM_LIMIT: usize = 8;

/// Both sides of the diagram formula for variables `X_(i,k)`, `i < m`,
/// `k < p`, with variable `(i, k)` at bit `k * m + i`. `moment(mask)` returns
/// joint moments of any subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagramCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub discrepancy: f64,
}

pub fn diagram_formula_check(m: usize, p: usize, moment: impl Fn(u32) -> f64) -> Result<DiagramCheck> {
    let total = m * p;
    if total > DIAGRAM_LIMIT || m == 0 || p == 0 {
        return Err(Error::Capacity { what: "diagram variables", size: total, limit: DIAGRAM_LIMIT });
    }
    let size = 1usize << total;
    let moments: Vec<f64> = (0..size as u32).map(|s| if s == 0 { 1.0 } else { moment(s) }).collect();
    let kappa = moments_to_cumulants(total, &moments);

    // Column k holds bits k*m .. k*m+m. Its Wick polynomial only involves
    // moments of subsets of that column.
    let column_mask = |k: usize| ((1u32 << m) - 1) << (k * m);
    let columns: Vec<Vec<f64>> = (0..p)
        .map(|k| {
            let local: Vec<f64> = (0..1u32 << m).map(|s| moments[(s << (k * m)) as usize]).collect();
            wick_polynomial(m, &local)
        })
        .collect();
    let mut lhs = 0.0;
    let mut choice = vec![0u32; p];
    loop {
        let mut coeff = 1.0;
        let mut union = 0u32;
        for k in 0..p {
            coeff *= columns[k][choice[k] as usize];
            union |= choice[k] << (k * m);
        }
        if coeff != 0.0 {
            lhs += coeff * moments[union as usize];
        }
        let mut k = 0;
        while k < p {
            choice[k] += 1;
            if choice[k] < 1 << m {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
        if k == p {
            break;
        }
    }

    let mut rhs = 0.0;
    for part in enumerate_partitions(total)? {
        let masks = part.masks();
        let admissible = masks.iter().all(|&b| (0..p).filter(|&k| b & column_mask(k) != 0).count() >= 2);
        if admissible {
            rhs += masks.iter().map(|&b| kappa[b as usize]).product::<f64>();
        }
    }
    Ok(DiagramCheck { lhs, rhs, discrepancy: (lhs - rhs).abs() })
}

/// Observation points of a stationary exclusion process: `(t_a, x_a)` in
/// microscopic units (unit swap rate per edge, integer sites).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFamily {
    pub lattice: TorusLattice,
    pub rho: f64,
    pub times: Vec<f64>,
    pub sites: Vec<usize>,
}

/// Separation used to break exact time ties.
pub const TIME_TIE_EPS: f64 = 1e-9;

impl PointFamily {
    pub fn new(lattice: &TorusLattice, rho: f64, times: Vec<f64>, sites: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return domain(format!("density {rho} outside [0, 1]"));
        }
        if times.len() != sites.len() {
            return domain("times and sites differ in length");
        }
        if times.iter().any(|t| !t.is_finite()) {
            return domain("observation times must be finite");
        }
        if sites.iter().any(|&x| x >= lattice.num_sites()) {
            return domain("observation site outside the lattice");
        }
        Ok(Self { lattice: lattice.clone(), rho, times, sites })
    }

    /// Points given in macroscopic units on `2^{-N} Z^d`: time is multiplied
    /// by `4^N` and space by `2^N` (rounded to the nearest site).
    pub fn from_rescaled(lattice: &TorusLattice, rho: f64, points: &[SpaceTimePoint]) -> Result<Self> {
        let n = lattice.require_level()? as i32;
        let l = lattice.side() as f64;
        let times = points.iter().map(|z| z.t * 4f64.powi(n)).collect();
        let sites = points
            .iter()
            .map(|z| {
                let c: Vec<i64> = z.x.iter().map(|&v| (v * l).round() as i64).collect();
                lattice.index_wrapped(&c)
            })
            .collect();
        Self::new(lattice, rho, times, sites)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sub-family selected by a mask.
    pub fn subset(&self, mask: u32) -> PointFamily {
        let idx: Vec<usize> = (0..self.len()).filter(|i| mask >> i & 1 == 1).collect();
        PointFamily {
            lattice: self.lattice.clone(),
            rho: self.rho,
            times: idx.iter().map(|&i| self.times[i]).collect(),
            sites: idx.iter().map(|&i| self.sites[i]).collect(),
        }
    }

    /// Points sorted by time with ties separated by [`TIME_TIE_EPS`].
    fn ordered(&self) -> Vec<(f64, usize)> {
        let mut pts: Vec<(f64, usize)> = self.times.iter().copied().zip(self.sites.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for i in 1..pts.len() {
            if pts[i].0 <= pts[i - 1].0 {
                log::warn!("time tie at {}; separating points by {TIME_TIE_EPS}", pts[i].0);
                pts[i].0 = pts[i - 1].0 + TIME_TIE_EPS;
            }
        }
        pts
    }
}

/// Tensor over tuples of sites, one axis per active block.
#[derive(Debug, Clone)]
struct SiteTensor {
    sites: usize,
    axes: Vec<usize>,
    data: Vec<f64>,
}

impl SiteTensor {
    fn scalar(v: f64, sites: usize) -> Self {
        Self { sites, axes: Vec::new(), data: vec![v] }
    }

    fn stride(&self, pos: usize) -> usize {
        self.sites.pow((self.axes.len() - 1 - pos) as u32)
    }

    fn coord(&self, flat: usize, pos: usize) -> usize {
        (flat / self.stride(pos)) % self.sites
    }

    fn position(&self, block: usize) -> Option<usize> {
        self.axes.iter().position(|&b| b == block)
    }

    /// Append an axis pinned at `site`.
    fn insert(&mut self, block: usize, site: usize) {
        let s = self.sites;
        let mut data = vec![0.0; self.data.len() * s];
        for (f, &v) in self.data.iter().enumerate() {
            data[f * s + site] = v;
        }
        self.axes.push(block);
        self.data = data;
    }

    fn pin(&mut self, block: usize, site: usize) {
        let pos = self.position(block).expect("active block");
        for f in 0..self.data.len() {
            if self.coord(f, pos) != site {
                self.data[f] = 0.0;
            }
        }
    }

    fn remove(&mut self, block: usize, site: usize) {
        let pos = self.position(block).expect("active block");
        let stride = self.stride(pos);
        let s = self.sites;
        let new_len = self.data.len() / s;
        let mut data = Vec::with_capacity(new_len);
        for g in 0..new_len {
            let (hi, lo) = (g / stride, g % stride);
            data.push(self.data[(hi * s + site) * stride + lo]);
        }
        self.axes.remove(pos);
        self.data = data;
    }

    /// Apply a kernel on the joint tuple of `blocks` (matrix indexed by
    /// mixed-radix tuples in the order given).
    fn apply(&mut self, blocks: &[usize], kernel: &[f64]) {
        let pos: Vec<usize> = blocks.iter().map(|&b| self.position(b).expect("active block")).collect();
        let s = self.sites;
        let j = pos.len();
        let width = s.pow(j as u32);
        let strides: Vec<usize> = pos.iter().map(|&p| self.stride(p)).collect();
        let mut out = vec![0.0; self.data.len()];
        for (f, &v) in self.data.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let mut key = 0;
            let mut base = f;
            for (&p, &st) in pos.iter().zip(&strides) {
                let c = self.coord(f, p);
                key = key * s + c;
                base -= c * st;
            }
            let row = &kernel[key * width..(key + 1) * width];
            for (y, &kv) in row.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let mut target = base;
                let mut rem = y;
                for q in (0..j).rev() {
                    target += (rem % s) * strides[q];
                    rem /= s;
                }
                out[target] += v * kv;
            }
        }
        self.data = out;
    }

    fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Cached labelled chains and tuple kernels on one torus.
#[derive(Debug)]
pub struct TransitionTables {
    lattice: TorusLattice,
    chains: HashMap<usize, LabelledChain>,
    moment_kernels: HashMap<(usize, u64), Arc<Vec<f64>>>,
    connected_kernels: HashMap<(usize, u64), Arc<Vec<f64>>>,
}

impl TransitionTables {
    pub fn new(lattice: &TorusLattice) -> Self {
        Self {
            lattice: lattice.clone(),
            chains: HashMap::new(),
            moment_kernels: HashMap::new(),
            connected_kernels: HashMap::new(),
        }
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn chain(&mut self, labels: usize) -> Result<&LabelledChain> {
        if !self.chains.contains_key(&labels) {
            let c = LabelledChain::new(&self.lattice, labels)?;
            self.chains.insert(labels, c);
        }
        Ok(&self.chains[&labels])
    }

    fn tuple_index(&self, tuple: &[usize]) -> usize {
        tuple.iter().fold(0, |acc, &x| acc * self.lattice.num_sites() + x)
    }

    /// `P(X_t^{x_i} = y_i for all i)` over all tuples in `S^j`, where
    /// `X^{x_i}` are stirring trajectories. Labels starting on a common site
    /// follow one trajectory, so a tuple with repeated sites evolves as the
    /// labelled chain on its distinct sites.
    pub fn moment_kernel(&mut self, labels: usize, t: f64) -> Result<Arc<Vec<f64>>> {
        let key = (labels, t.to_bits());
        if let Some(k) = self.moment_kernels.get(&key) {
            return Ok(k.clone());
        }
        let s = self.lattice.num_sites();
        let width = s.pow(labels as u32);
        let mut rows: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
        let mut out = vec![0.0; width * width];
        let mut xs = vec![0usize; labels];
        let mut ys = vec![0usize; labels];
        for xi in 0..width {
            let mut r = xi;
            for q in (0..labels).rev() {
                xs[q] = r % s;
                r /= s;
            }
            let mut distinct: Vec<usize> = Vec::with_capacity(labels);
            let class: Vec<usize> = xs
                .iter()
                .map(|&x| match distinct.iter().position(|&u| u == x) {
                    Some(c) => c,
                    None => {
                        distinct.push(x);
                        distinct.len() - 1
                    }
                })
                .collect();
            let row = match rows.get(&distinct) {
                Some(r) => r.clone(),
                None => {
                    let r = self.chain(distinct.len())?.transition_row(&distinct, t)?;
                    rows.insert(distinct.clone(), r.clone());
                    r
                }
            };
            let chain = &self.chains[&distinct.len()];
            for (state, &p) in chain.states().iter().zip(&row) {
                if p == 0.0 {
                    continue;
                }
                for (q, y) in ys.iter_mut().enumerate() {
                    *y = state[class[q]];
                }
                out[xi * width + self.tuple_index(&ys)] = p;
            }
        }
        let out = Arc::new(out);
        self.moment_kernels.insert(key, out.clone());
        Ok(out)
    }

    /// Connected kernel `p_{c;t}^x(y)` over all tuples in `S^j`: the joint
    /// cumulant of the indicators `1{X_t^{x_i} = y_i}`, assembled from the
    /// joint probabilities of every sub-tuple given by [`Self::moment_kernel`].
    pub fn connected_kernel(&mut self, labels: usize, t: f64) -> Result<Arc<Vec<f64>>> {
        let key = (labels, t.to_bits());
        if let Some(k) = self.connected_kernels.get(&key) {
            return Ok(k.clone());
        }
        let s = self.lattice.num_sites();
        let sub: Vec<Arc<Vec<f64>>> = (1..=labels).map(|j| self.moment_kernel(j, t)).collect::<Result<_>>()?;
        let parts = enumerate_partitions(labels)?;
        let coeffs: Vec<f64> = parts
            .iter()
            .map(|p| {
                let k = p.num_blocks();
                (1..k).map(|i| i as f64).product::<f64>() * if k % 2 == 1 { 1.0 } else { -1.0 }
            })
            .collect();
        let width = s.pow(labels as u32);
        let mut out = vec![0.0; width * width];
        let mut xs = vec![0usize; labels];
        let mut ys = vec![0usize; labels];
        for xi in 0..width {
            let mut r = xi;
            for q in (0..labels).rev() {
                xs[q] = r % s;
                r /= s;
            }
            for yi in 0..width {
                let mut r = yi;
                for q in (0..labels).rev() {
                    ys[q] = r % s;
                    r /= s;
                }
                let mut total = 0.0;
                for (p, &c) in parts.iter().zip(&coeffs) {
                    let mut prod = c;
                    for b in &p.blocks {
                        let kern = &sub[b.len() - 1];
                        let w = s.pow(b.len() as u32);
                        let fx = b.iter().fold(0, |a, &i| a * s + xs[i]);
                        let fy = b.iter().fold(0, |a, &i| a * s + ys[i]);
                        prod *= kern[fx * w + fy];
                        if prod == 0.0 {
                            break;
                        }
                    }
                    total += prod;
                }
                out[xi * width + yi] = total;
            }
        }
        let out = Arc::new(out);
        self.connected_kernels.insert(key, out.clone());
        Ok(out)
    }
}

/// A contraction scheme over time-sorted points `0..n`: a partition into
/// blocks, and for every gap `(i, i+1)` a partition of the blocks straddling
/// it into bundles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionScheme {
    pub partition: Vec<Vec<usize>>,
    /// `gap_bundles[i]` lists bundles (block ids) for the gap after point `i`.
    pub gap_bundles: Vec<Vec<Vec<usize>>>,
    pub connected: bool,
}

fn straddling(partition: &[Vec<usize>], gap: usize) -> Vec<usize> {
    partition
        .iter()
        .enumerate()
        .filter(|(_, b)| b[0] <= gap && *b.last().unwrap() > gap)
        .map(|(i, _)| i)
        .collect()
}

fn is_connected(partition: &[Vec<usize>], gap_bundles: &[Vec<Vec<usize>>]) -> bool {
    let k = partition.len();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for bundles in gap_bundles {
        for bundle in bundles {
            for w in bundle.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[a] = b;
            }
        }
    }
    let root = find(&mut parent, 0);
    (0..k).all(|i| find(&mut parent, i) == root)
}

/// Largest point family for scheme enumeration.
pub const SCHEME_LIMIT: usize = 5;

/// All contraction schemes over `n` time-ordered points. Cached per `n`.
pub fn contraction_schemes(n: usize) -> Result<Arc<Vec<ContractionScheme>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<ContractionScheme>>>>> = OnceLock::new();
    if n > SCHEME_LIMIT {
        return Err(Error::Capacity { what: "contraction scheme points", size: n, limit: SCHEME_LIMIT });
    }
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&n) {
        return Ok(v.clone());
    }
    let mut out = Vec::new();
    for part in enumerate_partitions(n)? {
        let blocks = part.blocks;
        let gaps: Vec<Vec<Vec<Vec<usize>>>> = (0..n.saturating_sub(1))
            .map(|g| partitions_of(&straddling(&blocks, g)))
            .collect();
        let mut choice = vec![0usize; gaps.len()];
        loop {
            let gap_bundles: Vec<Vec<Vec<usize>>> =
                gaps.iter().zip(&choice).map(|(opts, &c)| opts[c].clone()).collect();
            let connected = is_connected(&blocks, &gap_bundles);
            out.push(ContractionScheme { partition: blocks.clone(), gap_bundles, connected });
            let mut g = 0;
            while g < gaps.len() {
                choice[g] += 1;
                if choice[g] < gaps[g].len() {
                    break;
                }
                choice[g] = 0;
                g += 1;
            }
            if g == gaps.len() {
                break;
            }
        }
    }
    let out = Arc::new(out);
    cache.lock().unwrap().insert(n, out.clone());
    Ok(out)
}

/// Bernoulli cumulant weight `prod_B kappa_{|B|}(rho)` of a partition.
fn partition_weight(partition: &[Vec<usize>], rho: f64) -> f64 {
    partition.iter().map(|b| bernoulli_cumulant(b.len(), rho)).product()
}

#[derive(Clone, Copy)]
enum GapKernel {
    Labelled,
    Connected,
}

/// Sweep the time-ordered points carrying the weight of the active blocks.
fn sweep(
    tables: &mut TransitionTables,
    pts: &[(f64, usize)],
    partition: &[Vec<usize>],
    bundles: Option<&[Vec<Vec<usize>>]>,
    kind: GapKernel,
) -> Result<f64> {
    let n = pts.len();
    let s = tables.lattice().num_sites();
    let mut block_of = vec![0usize; n];
    for (b, block) in partition.iter().enumerate() {
        for &i in block {
            block_of[i] = b;
        }
    }
    let mut tensor = SiteTensor::scalar(1.0, s);
    for i in 0..n {
        let b = block_of[i];
        let block = &partition[b];
        let site = pts[i].1;
        if block.len() > 1 {
            if block[0] == i {
                tensor.insert(b, site);
            } else {
                tensor.pin(b, site);
                if *block.last().unwrap() == i {
                    tensor.remove(b, site);
                }
            }
        }
        if i + 1 < n && !tensor.axes.is_empty() {
            let dt = pts[i + 1].0 - pts[i].0;
            match kind {
                GapKernel::Labelled => {
                    let axes = tensor.axes.clone();
                    let k = tables.moment_kernel(axes.len(), dt)?;
                    tensor.apply(&axes, &k);
                }
                GapKernel::Connected => {
                    for bundle in &bundles.expect("bundles for connected sweep")[i] {
                        let k = tables.connected_kernel(bundle.len(), dt)?;
                        tensor.apply(bundle, &k);
                    }
                }
            }
        }
        if tensor.data.iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
    }
    Ok(tensor.total())
}

/// Largest family for the moment formula.
pub const MOMENT_LIMIT: usize = 6;

/// Stationary moment `E[prod_a xi_{t_a}(x_a)]` by the partition formula.
pub fn ssep_moment(tables: &mut TransitionTables, points: &PointFamily) -> Result<f64> {
    if points.len() > MOMENT_LIMIT {
        return Err(Error::Capacity { what: "moment points", size: points.len(), limit: MOMENT_LIMIT });
    }
    if points.lattice != *tables.lattice() {
        return Err(Error::LatticeMismatch("point family and tables differ".into()));
    }
    if points.is_empty() {
        return Ok(1.0);
    }
    let pts = points.ordered();
    let mut total = 0.0;
    for part in enumerate_partitions(pts.len())? {
        let w = partition_weight(&part.blocks, points.rho);
        if w == 0.0 {
            continue;
        }
        total += w * sweep(tables, &pts, &part.blocks, None, GapKernel::Labelled)?;
    }
    Ok(total)
}

/// `p_{c;t}^x(y)` for labelled particles started at `x` and observed at `y`.
pub fn connected_transition(tables: &mut TransitionTables, x: &[usize], y: &[usize], t: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return domain("tuples must be nonempty and of equal length");
    }
    let k = tables.connected_kernel(x.len(), t)?;
    let s = tables.lattice().num_sites();
    let w = s.pow(x.len() as u32);
    let fx = x.iter().fold(0, |a, &v| a * s + v);
    let fy = y.iter().fold(0, |a, &v| a * s + v);
    Ok(k[fx * w + fy])
}

/// Largest family for the connected-scheme cumulant.
pub const CONNECTED_LIMIT: usize = 4;

/// Joint cumulant of the occupation variables by summing connected schemes.
pub fn ssep_cumulant_connected(tables: &mut TransitionTables, points: &PointFamily) -> Result<f64> {
    if points.len() > CONNECTED_LIMIT || points.is_empty() {
        return Err(Error::Capacity { what: "cumulant points", size: points.len(), limit: CONNECTED_LIMIT });
    }
    let pts = points.ordered();
    let schemes = contraction_schemes(pts.len())?;
    let mut total = 0.0;
    for q in schemes.iter().filter(|q| q.connected) {
        let w = partition_weight(&q.partition, points.rho);
        if w == 0.0 {
            continue;
        }
        total += w * sweep(tables, &pts, &q.partition, Some(&q.gap_bundles), GapKernel::Connected)?;
    }
    Ok(total)
}

/// Joint cumulant by inverting moments of every sub-family.
pub fn ssep_cumulant_by_inversion(
    points: &PointFamily,
    mut moment: impl FnMut(&PointFamily) -> Result<f64>,
) -> Result<f64> {
    let n = points.len();
    let mut moments = vec![1.0; 1 << n];
    for mask in 1..1u32 << n {
        moments[mask as usize] = moment(&points.subset(mask))?;
    }
    Ok(moments_to_cumulants(n, &moments)[(1 << n) - 1])
}

/// Result of the martingale decomposition identity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub direct: f64,
    pub expanded: f64,
    pub discrepancy: f64,
}

/// Compare `p_t^x(y)` with
/// `sum_J prod_{j in J} p_t^{x_j}(y_j) E[prod_{i not in J} (1{X^{x_i}_t = y_i} - p_t^{x_i}(y_i))]`,
/// the expectation expanded over sub-tuple transition probabilities
/// computed by separate labelled chains.
pub fn martingale_decomposition_check(
    tables: &mut TransitionTables,
    x: &[usize],
    y: &[usize],
    t: f64,
) -> Result<DecompositionCheck> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return domain("tuples must be nonempty and of equal length");
    }
    let mut joint = vec![1.0; 1 << n];
    for mask in 1..1u32 << n {
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let xs: Vec<usize> = idx.iter().map(|&i| x[i]).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        joint[mask as usize] = tables.chain(idx.len())?.transition(&xs, &ys, t)?;
    }
    let single: Vec<f64> = (0..n).map(|i| joint[1 << i]).collect();
    let full = (1u32 << n) - 1;
    let centred = |s: u32| -> f64 {
        // E[prod_{i in s} (1_i - p_i)] = sum_{R subset s} P(R) prod_{i in s\R} (-p_i)
        let mut acc = 0.0;
        let mut r = s;
        loop {
            let rest = s ^ r;
            let sign: f64 = (0..n).filter(|i| rest >> i & 1 == 1).map(|i| -single[i]).product();
            acc += joint[r as usize] * sign;
            if r == 0 {
                break;
            }
            r = (r - 1) & s;
        }
        acc
    };
    let mut expanded = 0.0;
    let mut j = full;
    loop {
        let pj: f64 = (0..n).filter(|i| j >> i & 1 == 1).map(|i| single[i]).product();
        expanded += pj * centred(full ^ j);
        if j == 0 {
            break;
        }
        j = (j - 1) & full;
    }
    let direct = joint[full as usize];
    Ok(DecompositionCheck { direct, expanded, discrepancy: (direct - expanded).abs() })
}

/// Cycle-bound comparison for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleBound {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `sum_sigma prod_i (|z_{sigma(i+1)} - z_{sigma(i)}|_s v 2^{-N})^{-d/2}` over
/// the `(k-1)!` cyclic orderings of rescaled points on the unit torus.
pub fn cycle_bound_rhs(points: &[SpaceTimePoint], level: u32, dim: usize) -> f64 {
    let k = points.len();
    if k < 2 {
        return 1.0;
    }
    let floor = 2f64.powi(-(level as i32));
    let power = -(dim as f64) / 2.0;
    let w: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| a.parabolic_distance(b, Some(1.0)).max(floor).powf(power)).collect())
        .collect();
    let mut rest: Vec<usize> = (1..k).collect();
    let mut total = 0.0;
    permute(&mut rest, 0, &mut |perm| {
        let mut prod = w[0][perm[0]];
        for pair in perm.windows(2) {
            prod *= w[pair[0]][pair[1]];
        }
        prod *= w[*perm.last().unwrap()][0];
        total += prod;
    });
    total
}

fn permute(v: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        f(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, f);
        v.swap(start, i);
    }
}

/// Compare a rescaled cumulant value with the cycle bound.
pub fn cycle_bound(points: &[SpaceTimePoint], lhs: f64, level: u32, dim: usize) -> CycleBound {
    let rhs = cycle_bound_rhs(points, level, dim);
    CycleBound { lhs, rhs, ratio: lhs.abs() / rhs }
}

/// Joint cumulant of at most three occupation variables in closed form.
///
/// Under the stirring construction the occupations are Bernoulli values read
/// at the backward images of the points. Conditional on the stirring, the
/// joint cumulant of a group is `kappa_{|B|}` when all its images coincide
/// and zero otherwise, while conditional means are the constant `rho`. For
/// `k <= 3` every mixed term in the law of total cumulance therefore drops
/// out, leaving `kappa_k` times the probability that a single backward walk
/// visits all points in time order.
pub fn single_path_cumulant(points: &PointFamily) -> Result<f64> {
    let k = points.len();
    if k == 0 || k > 3 {
        return Err(Error::Capacity { what: "closed-form cumulant points", size: k, limit: 3 });
    }
    let lat = &points.lattice;
    let rate = 2.0 * lat.dim() as f64;
    let pts = points.ordered();
    let mut prob = 1.0;
    for w in pts.windows(2) {
        let p = crate::kernels::heat_kernel(lat, rate, w[1].0 - w[0].0)?;
        prob *= p.at(lat.sub(w[1].1, w[0].1));
    }
    Ok(bernoulli_cumulant(k, points.rho) * prob)
}

/// Summary of the cycle bound over random configurations at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStudy {
    pub dim: usize,
    pub level: u32,
    pub order: usize,
    pub rho: f64,
    pub rows: Vec<CycleBound>,
    pub max_ratio: f64,
    pub median_ratio: f64,
}

/// Sample `configurations` families of `order` macroscopic points on the
/// unit torus, round them to the level-`N` lattice and compare the rescaled
/// cumulant `2^{kdN/2} E_c[eta...]` with the cycle bound.
///
/// Configurations depend on the seed and the order only, so different
/// levels see the same macroscopic points. Each family sits in a parabolic
/// box whose side is log-uniform between `2^{-6}` and 1.
pub fn cycle_bound_study(
    dim: usize,
    level: u32,
    order: usize,
    rho: f64,
    configurations: usize,
    seed: u64,
) -> Result<CycleStudy> {
    if !(2..=3).contains(&order) {
        return Err(Error::Capacity { what: "cycle bound order", size: order, limit: 3 });
    }
    if configurations == 0 {
        return domain("at least one configuration is required");
    }
    let lat = TorusLattice::dyadic(dim, level)?;
    let side = lat.side() as f64;
    let micro_time = 4f64.powi(level as i32);
    let scale = 2f64.powf(order as f64 * dim as f64 * level as f64 / 2.0);
    let mut rng = task_rng(seed, substream(streams::CONFIGS, order as u64));
    let mut rows = Vec::with_capacity(configurations);
    for _ in 0..configurations {
        let r = 2f64.powf(-6.0 * rng.random::<f64>());
        let t0: f64 = rng.random();
        let x0: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
        let mut rescaled = Vec::with_capacity(order);
        let mut times = Vec::with_capacity(order);
        let mut sites = Vec::with_capacity(order);
        for _ in 0..order {
            let t = t0 + r * r * rng.random::<f64>();
            let coords: Vec<i64> =
                x0.iter().map(|&c| ((c + r * (rng.random::<f64>() - 0.5)) * side).round() as i64).collect();
            let site = lat.index_wrapped(&coords);
            let x = lat.coords(site).iter().map(|&c| c as f64 / side).collect();
            rescaled.push(SpaceTimePoint::new(t, x, true));
            times.push(t * micro_time);
            sites.push(site);
        }
        let family = PointFamily::new(&lat, rho, times, sites)?;
        let lhs = scale * single_path_cumulant(&family)?;
        rows.push(cycle_bound(&rescaled, lhs, level, dim));
    }
    let mut ratios: Vec<f64> = rows.iter().map(|b| b.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    Ok(CycleStudy {
        dim,
        level,
        order,
        rho,
        max_ratio: *ratios.last().unwrap(),
        median_ratio: ratios[ratios.len() / 2],
        rows,
    })
}

/// Monte-Carlo cumulant estimate with bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicas: usize,
}

const MC_CHUNK: usize = 1024;
const BOOTSTRAP_RESAMPLES: usize = 400;

/// Plug-in joint cumulant of the occupation variables from independent
/// stationary trajectories, with a bootstrap over replicas.
pub fn mc_cumulant_estimate(points: &PointFamily, replicas: usize, seed: u64) -> Result<McEstimate> {
    let k = points.len();
    if replicas < 2 {
        return domain("at least two replicas are required");
    }
    if k == 0 || k > 16 {
        return Err(Error::Capacity { what: "estimator points", size: k, limit: 16 });
    }
    if replicas < 10 << k {
        log::warn!("{replicas} replicas for an order-{k} cumulant: estimator variance will be large");
    }
    let lat = &points.lattice;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| points.times[a].total_cmp(&points.times[b]));
    let t0 = points.times[order[0]];
    let rel: Vec<f64> = order.iter().map(|&i| points.times[i] - t0).collect();
    let edges = lat.num_edges();
    let exp = Exp::new(edges as f64).expect("positive rate");
    let chunks = replicas.div_ceil(MC_CHUNK);
    let counts: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = task_rng(seed, substream(streams::REPLICAS, c as u64));
            let mut hist = vec![0u64; 1 << k];
            let todo = MC_CHUNK.min(replicas - c * MC_CHUNK);
            let mut occ = vec![0u8; lat.num_sites()];
            for _ in 0..todo {
                for o in occ.iter_mut() {
                    *o = u8::from(rng.random::<f64>() < points.rho);
                }
                let mut pattern = 0usize;
                let mut next = exp.sample(&mut rng);
                for (j, &tj) in rel.iter().enumerate() {
                    while next <= tj {
                        let (a, b) = lat.edge(rng.random_range(0..edges));
                        occ.swap(a, b);
                        next += exp.sample(&mut rng);
                    }
                    if occ[points.sites[order[j]]] == 1 {
                        pattern |= 1 << order[j];
                    }
                }
                hist[pattern] += 1;
            }
            hist
        })
        .collect();
    let mut hist = vec![0u64; 1 << k];
    for h in &counts {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let estimate = cumulant_from_histogram(k, &hist, replicas as u64);

    let mut rng = task_rng(seed, streams::BOOTSTRAP);
    let mut boots: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let resampled = multinomial(&mut rng, replicas as u64, &hist);
            cumulant_from_histogram(k, &resampled, replicas as u64)
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let var = boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64;
    let lo = boots[(0.025 * boots.len() as f64) as usize];
    let hi = boots[((0.975 * boots.len() as f64) as usize).min(boots.len() - 1)];
    Ok(McEstimate { estimate, std_error: var.sqrt(), ci_low: lo, ci_high: hi, replicas })
}

fn cumulant_from_histogram(k: usize, hist: &[u64], total: u64) -> f64 {
    let size = 1usize << k;
    let mut moments = vec![0.0; size];
    for (pattern, &c) in hist.iter().enumerate() {
        if c == 0 {
            continue;
        }
        // every subset of the observed pattern is fully occupied
        let mut sub = pattern;
        loop {
            moments[sub] += c as f64;
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & pattern;
        }
    }
    for m in moments.iter_mut() {
        *m /= total as f64;
    }
    moments_to_cumulants(k, &moments)[size - 1]
}

fn multinomial<R: Rng>(rng: &mut R, n: u64, hist: &[u64]) -> Vec<u64> {
    let total: u64 = hist.iter().sum();
    let mut remaining_n = n;
    let mut remaining_mass = total;
    hist.iter()
        .map(|&c| {
            if remaining_n == 0 || c == 0 || remaining_mass == 0 {
                remaining_mass = remaining_mass.saturating_sub(c);
                return 0;
            }
            let p = (c as f64 / remaining_mass as f64).min(1.0);
            let draw = Binomial::new(remaining_n, p).expect("valid binomial").sample(rng);
            remaining_n -= draw;
            remaining_mass -= c;
            draw
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_numbers() {
        let counts: Vec<usize> = (0..=6).map(|n| enumerate_partitions(n).unwrap().len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 5, 15, 52, 203]);
        assert!(enumerate_partitions(13).is_err());
    }

    #[test]
    fn partitions_are_distinct_and_cover() {
        let parts = enumerate_partitions(5).unwrap();
        let set: std::collections::HashSet<_> = parts.iter().map(|p| p.masks()).collect();
        assert_eq!(set.len(), parts.len());
        for p in &parts {
            let masks = p.masks();
            assert_eq!(masks.iter().fold(0, |a, m| a | m), 0b11111);
            assert_eq!(masks.iter().map(|m| m.count_ones()).sum::<u32>(), 5);
        }
    }

    #[test]
    fn bernoulli_cumulants_closed_forms() {
        for q in [0.1, 0.3, 0.5, 0.8] {
            let v = q * (1.0 - q);
            assert!((bernoulli_cumulant(1, q) - q).abs() < 1e-15);
            assert!((bernoulli_cumulant(2, q) - v).abs() < 1e-15);
            assert!((bernoulli_cumulant(3, q) - v * (1.0 - 2.0 * q)).abs() < 1e-15);
            assert!((bernoulli_cumulant(4, q) - v * (1.0 - 6.0 * q + 6.0 * q * q)).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_cumulant_is_covariance() {
        let m = vec![1.0, 0.3, 0.6, 0.25];
        let k = moments_to_cumulants(2, &m);
        assert!((k[3] - (0.25 - 0.18)).abs() < 1e-15);
    }

    #[test]
    fn wick_base_cases() {
        assert_eq!(wick_product(&[], &[0.0]), 1.0);
        let k = vec![0.0, 0.4];
        assert!((wick_product(&[1.0], &k) - 0.6).abs() < 1e-15);
        // pair: X1X2 - X1 E X2 - X2 E X1 + E X1 E X2 - Cov
        let (m1, m2, c) = (0.3, 0.6, 0.07);
        let k = vec![0.0, m1, m2, c];
        let (x1, x2) = (1.0, 0.0);
        let expect = x1 * x2 - x1 * m2 - x2 * m1 + m1 * m2 - c;
        assert!((wick_product(&[x1, x2], &k) - expect).abs() < 1e-15);
    }

    #[test]
    fn scheme_counts_for_three_points() {
        let s = contraction_schemes(3).unwrap();
        let connected: Vec<_> = s.iter().filter(|q| q.connected).collect();
        assert_eq!(connected.len(), 1);
        assert_eq!(connected[0].partition, vec![vec![0, 1, 2]]);
    }
}
