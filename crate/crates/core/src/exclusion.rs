//! Symmetric simple exclusion through the stirring (graphical) construction.
//!
//! Each undirected edge carries a Poisson clock; at a ring the contents of its
//! two endpoints are exchanged. Occupancies and labelled particles replay the
//! same [`EventStream`], which couples every initial condition pathwise.
//!
//! A different coupling assigns exponential clocks to particles rather than
//! to edges. It gives the same law for occupancies but not the same joint
//! law across initial conditions; only the edge construction is implemented.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::lattice::TorusLattice;
use crate::markov::{SparseGenerator, SymmetricSemigroup};
use crate::rng::task_rng;

const STREAM_MAGIC: [u8; 4] = *b"SSEV";
const STREAM_VERSION: u32 = 1;
/// Expected number of events per generation window.
const WINDOW_EVENTS: f64 = 65_536.0;

/// Time-sorted record of swap events on the edges of a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    lattice: TorusLattice,
    rate: f64,
    horizon: f64,
    seed: u64,
    times: Vec<f64>,
    edges: Vec<u32>,
}

impl EventStream {
    /// Independent Poisson(`rate`) clocks on every edge up to `horizon`.
    ///
    /// Events are produced window by window, each window drawing from its own
    /// counter-based generator, so the stream for a horizon `T` is a prefix of
    /// the stream for any `T' > T`.
    pub fn sample(lattice: &TorusLattice, rate: f64, horizon: f64, seed: u64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return domain(format!("rate must be positive, got {rate}"));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return domain(format!("horizon must be nonnegative, got {horizon}"));
        }
        let mut s = Self {
            lattice: lattice.clone(),
            rate,
            horizon: 0.0,
            seed,
            times: Vec::new(),
            edges: Vec::new(),
        };
        s.extend_to(horizon);
        Ok(s)
    }

    /// Stream with no events, for frozen environments.
    pub fn empty(lattice: &TorusLattice, rate: f64, horizon: f64) -> Self {
        Self {
            lattice: lattice.clone(),
            rate,
            horizon,
            seed: 0,
            times: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Build a stream from explicit events (sorted by time, times in
    /// `(0, horizon]`).
    pub fn from_events(
        lattice: &TorusLattice,
        rate: f64,
        horizon: f64,
        events: &[(f64, u32)],
    ) -> Result<Self> {
        let mut prev = 0.0;
        for &(t, e) in events {
            if !(t > prev) || t > horizon {
                return domain(format!("event time {t} out of order or beyond horizon"));
            }
            if e as usize >= lattice.num_edges() {
                return domain(format!("edge index {e} out of range"));
            }
            prev = t;
        }
        Ok(Self {
            lattice: lattice.clone(),
            rate,
            horizon,
            seed: 0,
            times: events.iter().map(|e| e.0).collect(),
            edges: events.iter().map(|e| e.1).collect(),
        })
    }

    fn window_length(&self) -> f64 {
        WINDOW_EVENTS / (self.rate * self.lattice.num_edges() as f64)
    }

    /// Append events up to `horizon`. Existing events are never modified.
    pub fn extend_to(&mut self, horizon: f64) {
        if horizon <= self.horizon {
            return;
        }
        let w = self.window_length();
        let num_edges = self.lattice.num_edges();
        let total_rate = self.rate * num_edges as f64;
        let exp = Exp::new(total_rate).expect("positive rate");
        let first = (self.horizon / w).floor() as u64;
        let last = (horizon / w).ceil() as u64;
        for k in first..last.max(first + 1) {
            let start = k as f64 * w;
            let end = ((k + 1) as f64 * w).min(horizon);
            let mut rng = task_rng(self.seed, k);
            let mut t = start;
            loop {
                t += exp.sample(&mut rng);
                let e = rng.random_range(0..num_edges) as u32;
                if t > (k + 1) as f64 * w {
                    break;
                }
                if t <= self.horizon {
                    // already emitted by an earlier extension
                    continue;
                }
                if t > end {
                    break;
                }
                let mut time = t;
                if let Some(&prev) = self.times.last() {
                    if time <= prev {
                        log::warn!("event time tie at {prev}; shifting by one ulp");
                        time = prev.next_up();
                    }
                }
                self.times.push(time);
                self.edges.push(e);
            }
        }
        self.horizon = horizon;
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn edge_indices(&self) -> &[u32] {
        &self.edges
    }

    /// Events with time `<= t`.
    pub fn events_until(&self, t: f64) -> impl Iterator<Item = (f64, u32)> + '_ {
        let n = self.times.partition_point(|&s| s <= t);
        self.times[..n].iter().copied().zip(self.edges[..n].iter().copied())
    }

    /// Serialize as a little-endian record: magic, version, d, N, rate,
    /// horizon, seed, event count, then `(f64 time, u32 edge)` pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let level = self.lattice.require_level()?;
        w.write_all(&STREAM_MAGIC)?;
        w.write_all(&STREAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.lattice.dim() as u32).to_le_bytes())?;
        w.write_all(&level.to_le_bytes())?;
        w.write_all(&self.rate.to_le_bytes())?;
        w.write_all(&self.horizon.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        for (t, e) in self.times.iter().zip(&self.edges) {
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
            let mut b = [0u8; K];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        if take::<4, _>(&mut r)? != STREAM_MAGIC {
            return Err(Error::Format("bad event stream magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != STREAM_VERSION {
            return Err(Error::Format(format!("unsupported event stream version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let level = u32::from_le_bytes(take(&mut r)?);
        let rate = f64::from_le_bytes(take(&mut r)?);
        let horizon = f64::from_le_bytes(take(&mut r)?);
        let seed = u64::from_le_bytes(take(&mut r)?);
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let lattice = TorusLattice::dyadic(dim, level)?;
        let mut times = Vec::with_capacity(count);
        let mut edges = Vec::with_capacity(count);
        for _ in 0..count {
            times.push(f64::from_le_bytes(take(&mut r)?));
            edges.push(u32::from_le_bytes(take(&mut r)?));
        }
        Ok(Self { lattice, rate, horizon, seed, times, edges })
    }
}

/// One bit of occupancy per site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyState {
    lattice: TorusLattice,
    occ: Vec<u8>,
}

impl OccupancyState {
    pub fn new(lattice: &TorusLattice, occ: Vec<u8>) -> Result<Self> {
        if occ.len() != lattice.num_sites() {
            return Err(Error::LatticeMismatch(format!(
                "{} occupancy values for {} sites",
                occ.len(),
                lattice.num_sites()
            )));
        }
        if occ.iter().any(|&v| v > 1) {
            return domain("occupancy values must be 0 or 1");
        }
        Ok(Self { lattice: lattice.clone(), occ })
    }

    pub fn empty(lattice: &TorusLattice) -> Self {
        Self { lattice: lattice.clone(), occ: vec![0; lattice.num_sites()] }
    }

    pub fn full(lattice: &TorusLattice) -> Self {
        Self { lattice: lattice.clone(), occ: vec![1; lattice.num_sites()] }
    }

    /// Product Bernoulli(`rho`) configuration.
    pub fn bernoulli<R: Rng>(lattice: &TorusLattice, rho: f64, rng: &mut R) -> Self {
        let occ = (0..lattice.num_sites())
            .map(|_| u8::from(rng.random::<f64>() < rho))
            .collect();
        Self { lattice: lattice.clone(), occ }
    }

    /// Bernoulli configuration thresholding the given uniforms, so that one
    /// set of uniforms yields ordered configurations for ordered densities.
    pub fn from_uniforms(lattice: &TorusLattice, rho: f64, uniforms: &[f64]) -> Self {
        let occ = uniforms.iter().map(|&u| u8::from(u < rho)).collect();
        Self { lattice: lattice.clone(), occ }
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn values(&self) -> &[u8] {
        &self.occ
    }

    pub fn get(&self, site: usize) -> u8 {
        self.occ[site]
    }

    pub fn particle_count(&self) -> usize {
        self.occ.iter().map(|&v| v as usize).sum()
    }

    fn swap_edge(&mut self, e: u32) {
        let (a, b) = self.lattice.edge(e as usize);
        self.occ.swap(a, b);
    }
}

fn check_horizon(stream: &EventStream, t: f64) -> Result<()> {
    if t < 0.0 || t > stream.horizon() * (1.0 + 1e-12) {
        return domain(format!("time {t} outside [0, {}]", stream.horizon()));
    }
    Ok(())
}

/// Apply every event with time `<= t`.
pub fn evolve_occupancy(initial: &OccupancyState, stream: &EventStream, t: f64) -> Result<OccupancyState> {
    if initial.lattice != stream.lattice {
        return Err(Error::LatticeMismatch("occupancy and stream lattices differ".into()));
    }
    check_horizon(stream, t)?;
    let mut state = initial.clone();
    for (_, e) in stream.events_until(t) {
        state.swap_edge(e);
    }
    Ok(state)
}

/// Distinct labelled particles; label `i` sits at `positions[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelledConfiguration {
    pub positions: Vec<usize>,
}

impl LabelledConfiguration {
    pub fn new(lattice: &TorusLattice, positions: Vec<usize>) -> Result<Self> {
        if positions.iter().any(|&p| p >= lattice.num_sites()) {
            return domain("labelled position outside the lattice");
        }
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return domain("labelled positions must be pairwise distinct");
        }
        Ok(Self { positions })
    }

    /// Occupancy indicator of the labelled sites.
    pub fn indicator(&self, lattice: &TorusLattice) -> OccupancyState {
        let mut occ = vec![0; lattice.num_sites()];
        for &p in &self.positions {
            occ[p] = 1;
        }
        OccupancyState { lattice: lattice.clone(), occ }
    }
}

/// Move labels along the stirring events with time `<= t`.
pub fn evolve_labelled(
    config: &LabelledConfiguration,
    stream: &EventStream,
    t: f64,
) -> Result<LabelledConfiguration> {
    let lattice = stream.lattice();
    let config = LabelledConfiguration::new(lattice, config.positions.clone())?;
    check_horizon(stream, t)?;
    const EMPTY: u32 = u32::MAX;
    let mut at = vec![EMPTY; lattice.num_sites()];
    for (i, &p) in config.positions.iter().enumerate() {
        at[p] = i as u32;
    }
    let mut pos = config.positions;
    for (_, e) in stream.events_until(t) {
        let (a, b) = lattice.edge(e as usize);
        let (la, lb) = (at[a], at[b]);
        if la == EMPTY && lb == EMPTY {
            continue;
        }
        at[a] = lb;
        at[b] = la;
        if la != EMPTY {
            pos[la as usize] = b;
        }
        if lb != EMPTY {
            pos[lb as usize] = a;
        }
    }
    Ok(LabelledConfiguration { positions: pos })
}

/// Initial occupancy plus the stream driving it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionTrajectory {
    pub initial: OccupancyState,
    pub stream: EventStream,
}

impl ExclusionTrajectory {
    /// Stationary trajectory: Bernoulli(`rho`) start, rate-`rate` stirring.
    /// The initial configuration and the events use separate counters of
    /// `seed`.
    pub fn stationary(lattice: &TorusLattice, rho: f64, rate: f64, horizon: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return domain(format!("density {rho} outside [0, 1]"));
        }
        let mut rng = task_rng(seed, u64::MAX);
        let initial = OccupancyState::bernoulli(lattice, rho, &mut rng);
        let stream = EventStream::sample(lattice, rate, horizon, seed)?;
        Ok(Self { initial, stream })
    }

    pub fn lattice(&self) -> &TorusLattice {
        self.stream.lattice()
    }

    pub fn occupancy_at(&self, t: f64) -> Result<OccupancyState> {
        evolve_occupancy(&self.initial, &self.stream, t)
    }

    /// Per-site occupation histories for repeated time queries.
    pub fn freeze(&self) -> FrozenEnvironment {
        FrozenEnvironment::from_trajectory(self)
    }
}

/// Pairing of the fluctuation field with a test function `f` on the rescaled
/// torus: `2^{-Nd} sum_x f(x / 2^N) 2^{Nd/2} (xi(x) - rho)`, with `xi` read
/// at macroscopic time `t`. The trajectory clock is converted to the
/// rescaled clock through its rate: a unit-rate trajectory is read at
/// `4^N t`, a rate-`4^N` trajectory at `t`.
pub fn fluctuation_field<F>(trajectory: &ExclusionTrajectory, f: F, rho: f64, t: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let lattice = trajectory.lattice();
    let n = lattice.require_level()?;
    let scale = 4f64.powi(n as i32) / trajectory.stream.rate();
    let state = trajectory.occupancy_at(t * scale)?;
    let h = lattice.spacing();
    let d = lattice.dim() as i32;
    let mut x = vec![0.0; lattice.dim()];
    let mut acc = 0.0;
    for site in 0..lattice.num_sites() {
        for (a, slot) in x.iter_mut().enumerate() {
            *slot = lattice.coord(site, a) as f64 * h;
        }
        acc += f(&x) * (state.get(site) as f64 - rho);
    }
    Ok(acc * h.powi(d) * 2f64.powf(0.5 * (n as f64) * d as f64))
}

/// Occupation history of every site of a trajectory, with prefix integrals
/// so that `int_a^b xi(s, y) ds` costs two binary searches.
#[derive(Debug, Clone)]
pub struct FrozenEnvironment {
    lattice: TorusLattice,
    horizon: f64,
    initial: Vec<u8>,
    /// Times at which the site's value flips.
    flips: Vec<Vec<f64>>,
    /// Occupied time accumulated up to each flip.
    cumulative: Vec<Vec<f64>>,
}

impl FrozenEnvironment {
    pub fn from_trajectory(traj: &ExclusionTrajectory) -> Self {
        let lattice = traj.lattice().clone();
        let mut occ = traj.initial.values().to_vec();
        let n = lattice.num_sites();
        let mut flips = vec![Vec::new(); n];
        for (t, e) in traj.stream.events_until(f64::INFINITY) {
            let (a, b) = lattice.edge(e as usize);
            if occ[a] != occ[b] {
                occ.swap(a, b);
                flips[a].push(t);
                flips[b].push(t);
            }
        }
        Self::build(lattice, traj.stream.horizon(), traj.initial.values().to_vec(), flips)
    }

    /// Environment that never changes.
    pub fn constant(state: &OccupancyState, horizon: f64) -> Self {
        let n = state.lattice().num_sites();
        Self::build(state.lattice().clone(), horizon, state.values().to_vec(), vec![Vec::new(); n])
    }

    fn build(lattice: TorusLattice, horizon: f64, initial: Vec<u8>, flips: Vec<Vec<f64>>) -> Self {
        let cumulative = flips
            .iter()
            .zip(&initial)
            .map(|(fl, &v0)| {
                let mut acc = 0.0;
                let mut prev = 0.0;
                let mut v = v0;
                fl.iter()
                    .map(|&t| {
                        if v == 1 {
                            acc += t - prev;
                        }
                        prev = t;
                        v ^= 1;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { lattice, horizon, initial, flips, cumulative }
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Flip times of a site.
    pub fn flips(&self, site: usize) -> &[f64] {
        &self.flips[site]
    }

    /// Occupancy at `(t, site)`, right-continuous in `t`.
    pub fn value(&self, site: usize, t: f64) -> u8 {
        let k = self.flips[site].partition_point(|&s| s <= t);
        self.initial[site] ^ (k as u8 & 1)
    }

    /// Full configuration at time `t`.
    pub fn snapshot(&self, t: f64) -> Vec<u8> {
        (0..self.lattice.num_sites()).map(|y| self.value(y, t)).collect()
    }

    /// `int_0^t xi(s, site) ds`.
    pub fn occupied_time(&self, site: usize, t: f64) -> f64 {
        let fl = &self.flips[site];
        let k = fl.partition_point(|&s| s <= t);
        let (base, since) = if k == 0 { (0.0, 0.0) } else { (self.cumulative[site][k - 1], fl[k - 1]) };
        let v = self.initial[site] ^ (k as u8 & 1);
        base + if v == 1 { t - since } else { 0.0 }
    }

    /// `int_a^b xi(s, site) ds` for `a <= b`.
    pub fn occupied_between(&self, site: usize, a: f64, b: f64) -> f64 {
        self.occupied_time(site, b) - self.occupied_time(site, a)
    }

    /// All flip times of all sites in `(a, b]`, merged and sorted.
    pub fn change_times(&self, a: f64, b: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .flips
            .iter()
            .flat_map(|fl| {
                let lo = fl.partition_point(|&s| s <= a);
                let hi = fl.partition_point(|&s| s <= b);
                fl[lo..hi].iter().copied()
            })
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

/// Largest labelled state space accepted by the exact routines.
pub const LABELLED_STATE_LIMIT: usize = 20_000;
/// Largest state space handled by dense eigen decomposition.
pub const DENSE_STATE_LIMIT: usize = 2_500;

/// Exact labelled exclusion with `k` labels: states are injective tuples.
#[derive(Debug, Clone)]
pub struct LabelledChain {
    lattice: TorusLattice,
    labels: usize,
    states: Vec<Vec<usize>>,
    lookup: HashMap<Vec<usize>, usize>,
    generator: SparseGenerator,
    semigroup: Option<SymmetricSemigroup>,
}

fn injective_tuples(num_sites: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for x in 0..n {
            if !cur.contains(&x) {
                cur.push(x);
                rec(n, k, cur, out);
                cur.pop();
            }
        }
    }
    rec(num_sites, k, &mut cur, &mut out);
    out
}

fn falling_factorial(n: usize, k: usize) -> Option<usize> {
    (0..k).try_fold(1usize, |acc, i| acc.checked_mul(n.checked_sub(i)?))
}

impl LabelledChain {
    pub fn new(lattice: &TorusLattice, labels: usize) -> Result<Self> {
        let size = falling_factorial(lattice.num_sites(), labels).unwrap_or(usize::MAX);
        if size > LABELLED_STATE_LIMIT || labels == 0 {
            return Err(Error::Capacity {
                what: "labelled state space",
                size,
                limit: LABELLED_STATE_LIMIT,
            });
        }
        let states = injective_tuples(lattice.num_sites(), labels);
        let lookup: HashMap<Vec<usize>, usize> =
            states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let rows = states
            .iter()
            .map(|s| {
                let mut row = Vec::new();
                for (a, b) in lattice.edges() {
                    if !s.contains(&a) && !s.contains(&b) {
                        continue;
                    }
                    let next: Vec<usize> = s
                        .iter()
                        .map(|&p| if p == a { b } else if p == b { a } else { p })
                        .collect();
                    row.push((lookup[&next] as u32, 1.0));
                }
                row
            })
            .collect();
        let generator = SparseGenerator::from_rows(rows);
        let semigroup = if states.len() <= DENSE_STATE_LIMIT {
            Some(SymmetricSemigroup::new(generator.to_dense())?)
        } else {
            None
        };
        Ok(Self { lattice: lattice.clone(), labels, states, lookup, generator, semigroup })
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn states(&self) -> &[Vec<usize>] {
        &self.states
    }

    pub fn state_index(&self, tuple: &[usize]) -> Option<usize> {
        self.lookup.get(tuple).copied()
    }

    pub fn generator(&self) -> &SparseGenerator {
        &self.generator
    }

    /// Dense transition matrix at time `t`.
    pub fn transition_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        match &self.semigroup {
            Some(s) => Ok(s.at(t)),
            None => Err(Error::Capacity {
                what: "dense labelled transition matrix",
                size: self.states.len(),
                limit: DENSE_STATE_LIMIT,
            }),
        }
    }

    /// Row `p_t^x(.)` of the transition matrix.
    pub fn transition_row(&self, from: &[usize], t: f64) -> Result<Vec<f64>> {
        let i = self
            .state_index(from)
            .ok_or_else(|| Error::Domain("start tuple is not injective".into()))?;
        let mut e = vec![0.0; self.states.len()];
        e[i] = 1.0;
        Ok(match &self.semigroup {
            Some(s) => s.propagate(&e, t),
            None => self.generator.propagate_left(&e, t),
        })
    }

    /// `p_t^x(y)`; zero when either tuple has a repeated site.
    pub fn transition(&self, from: &[usize], to: &[usize], t: f64) -> Result<f64> {
        let (Some(_), Some(j)) = (self.state_index(from), self.state_index(to)) else {
            return Ok(0.0);
        };
        Ok(self.transition_row(from, t)?[j])
    }
}

/// Dense transition matrix of labelled exclusion with `labels` particles.
pub fn exact_labelled_transition(lattice: &TorusLattice, labels: usize, t: f64) -> Result<(LabelledChain, DMatrix<f64>)> {
    if t < 0.0 {
        return domain("time must be nonnegative");
    }
    let chain = LabelledChain::new(lattice, labels)?;
    let m = chain.transition_matrix(t)?;
    Ok((chain, m))
}

/// Largest site count for the full occupancy generator.
pub const FULL_GENERATOR_SITE_LIMIT: usize = 16;
const FULL_DENSE_SITE_LIMIT: usize = 10;

/// SSEP generator on all of `{0,1}^sites`, states encoded as bitmasks.
#[derive(Debug, Clone)]
pub struct FullGenerator {
    lattice: TorusLattice,
    generator: SparseGenerator,
    semigroup: Option<SymmetricSemigroup>,
}

impl FullGenerator {
    pub fn new(lattice: &TorusLattice) -> Result<Self> {
        let n = lattice.num_sites();
        if n > FULL_GENERATOR_SITE_LIMIT {
            return Err(Error::Capacity {
                what: "occupancy state space (log2)",
                size: n,
                limit: FULL_GENERATOR_SITE_LIMIT,
            });
        }
        let edges: Vec<(usize, usize)> = lattice.edges().collect();
        let rows = (0..1u32 << n)
            .map(|s| {
                edges
                    .iter()
                    .filter(|&&(a, b)| (s >> a) & 1 != (s >> b) & 1)
                    .map(|&(a, b)| (s ^ (1 << a) ^ (1 << b), 1.0))
                    .collect()
            })
            .collect();
        let generator = SparseGenerator::from_rows(rows);
        let semigroup = if n <= FULL_DENSE_SITE_LIMIT {
            Some(SymmetricSemigroup::new(generator.to_dense())?)
        } else {
            None
        };
        Ok(Self { lattice: lattice.clone(), generator, semigroup })
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn generator(&self) -> &SparseGenerator {
        &self.generator
    }

    /// Product Bernoulli(`rho`) measure as a probability vector.
    pub fn bernoulli_measure(&self, rho: f64) -> Vec<f64> {
        let n = self.lattice.num_sites();
        (0..1u32 << n)
            .map(|s| {
                let k = s.count_ones() as i32;
                rho.powi(k) * (1.0 - rho).powi(n as i32 - k)
            })
            .collect()
    }

    /// `mu P_t`.
    pub fn propagate(&self, mu: &[f64], t: f64) -> Vec<f64> {
        if t == 0.0 {
            return mu.to_vec();
        }
        match &self.semigroup {
            Some(s) => s.propagate(mu, t),
            None => self.generator.propagate_left(mu, t),
        }
    }

    /// `max |(nu_rho Q)(eta)|`.
    pub fn stationarity_residual(&self, rho: f64) -> f64 {
        let mu = self.bernoulli_measure(rho);
        let mut out = vec![0.0; mu.len()];
        self.generator.apply_left(&mu, &mut out);
        out.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |nu(x) Q(x,y) - nu(y) Q(y,x)|` over all pairs.
    pub fn detailed_balance_residual(&self, rho: f64) -> f64 {
        let mu = self.bernoulli_measure(rho);
        let rows = self.generator.rows();
        let mut worst = 0.0f64;
        for (x, row) in rows.iter().enumerate() {
            for &(y, q) in row {
                let back = rows[y as usize]
                    .iter()
                    .find(|&&(z, _)| z as usize == x)
                    .map_or(0.0, |&(_, r)| r);
                worst = worst.max((mu[x] * q - mu[y as usize] * back).abs());
            }
        }
        worst
    }

    /// Stationary moment `E[prod_a xi_{t_a}(x_a)]` under Bernoulli(`rho`),
    /// evaluated by alternating propagation and multiplication by site
    /// indicators in time order.
    pub fn moment(&self, rho: f64, points: &[(f64, usize)]) -> f64 {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut mu = self.bernoulli_measure(rho);
        let mut now = pts.first().map_or(0.0, |p| p.0);
        for &(t, x) in &pts {
            if t > now {
                mu = self.propagate(&mu, t - now);
                now = t;
            }
            for (s, m) in mu.iter_mut().enumerate() {
                if (s >> x) & 1 == 0 {
                    *m = 0.0;
                }
            }
        }
        mu.iter().sum()
    }
}

/// Full-generator semigroup wrapper matching the module's public naming.
pub fn exact_full_generator(lattice: &TorusLattice) -> Result<FullGenerator> {
    FullGenerator::new(lattice)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring4() -> TorusLattice {
        TorusLattice::dyadic(1, 2).unwrap()
    }

    #[test]
    fn empty_stream_at_zero_horizon() {
        let s = EventStream::sample(&ring4(), 1.0, 0.0, 1).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn stream_is_prefix_consistent() {
        let lat = TorusLattice::dyadic(2, 3).unwrap();
        let short = EventStream::sample(&lat, 4.0, 100.0, 9).unwrap();
        let mut long = EventStream::sample(&lat, 4.0, 10.0, 9).unwrap();
        long.extend_to(100.0);
        assert_eq!(short.times(), long.times());
        assert_eq!(short.edge_indices(), long.edge_indices());
        assert!(short.times().windows(2).all(|w| w[0] < w[1]));
        assert!(short.times().iter().all(|&t| t > 0.0 && t <= 100.0));
    }

    #[test]
    fn single_swap_moves_particle() {
        let lat = ring4();
        let init = OccupancyState::new(&lat, vec![1, 0, 0, 0]).unwrap();
        let s = EventStream::from_events(&lat, 1.0, 1.0, &[(0.5, 0)]).unwrap();
        assert_eq!(evolve_occupancy(&init, &s, 0.4).unwrap(), init);
        let after = evolve_occupancy(&init, &s, 1.0).unwrap();
        assert_eq!(after.values(), &[0, 1, 0, 0]);
    }

    #[test]
    fn adjacent_labels_exchange() {
        let lat = ring4();
        let s = EventStream::from_events(&lat, 1.0, 1.0, &[(0.3, 1)]).unwrap();
        let c = LabelledConfiguration::new(&lat, vec![1, 2]).unwrap();
        let out = evolve_labelled(&c, &s, 1.0).unwrap();
        assert_eq!(out.positions, vec![2, 1]);
        assert!(LabelledConfiguration::new(&lat, vec![1, 1]).is_err());
    }

    #[test]
    fn one_particle_kernel_on_ring4() {
        let (chain, m) = exact_labelled_transition(&ring4(), 1, 0.7).unwrap();
        let t: f64 = 0.7;
        let expect = (1.0 + 2.0 * (-2.0 * t).exp() + (-4.0 * t).exp()) / 4.0;
        let i = chain.state_index(&[0]).unwrap();
        assert!((m[(i, i)] - expect).abs() < 1e-13);
    }

    #[test]
    fn labelled_identity_and_stochastic() {
        let (_, m0) = exact_labelled_transition(&ring4(), 2, 0.0).unwrap();
        assert!((m0 - DMatrix::identity(12, 12)).amax() < 1e-13);
        let (_, m) = exact_labelled_transition(&ring4(), 2, 1.3).unwrap();
        for r in 0..12 {
            assert!((m.row(r).sum() - 1.0).abs() < 1e-12);
        }
        assert!((&m - m.transpose()).amax() < 1e-13);
    }

    #[test]
    fn capacity_guard() {
        let lat = TorusLattice::dyadic(3, 3).unwrap();
        assert!(matches!(LabelledChain::new(&lat, 2), Err(Error::Capacity { .. })));
        let big = TorusLattice::dyadic(1, 5).unwrap();
        assert!(matches!(FullGenerator::new(&big), Err(Error::Capacity { .. })));
    }

    #[test]
    fn full_generator_is_reversible() {
        let g = FullGenerator::new(&ring4()).unwrap();
        for rho in [0.2, 0.5, 0.9] {
            assert!(g.stationarity_residual(rho) < 1e-12);
            assert!(g.detailed_balance_residual(rho) < 1e-12);
        }
    }

    #[test]
    fn self_duality_two_point() {
        let lat = ring4();
        let g = FullGenerator::new(&lat).unwrap();
        let rho = 0.5;
        let t: f64 = 0.9;
        let m = g.moment(rho, &[(0.0, 0), (t, 0)]);
        let p = (1.0 + 2.0 * (-2.0 * t).exp() + (-4.0 * t).exp()) / 4.0;
        assert!((m - (rho * rho + rho * (1.0 - rho) * p)).abs() < 1e-12);
    }

    #[test]
    fn frozen_environment_integrals() {
        let lat = ring4();
        let init = OccupancyState::new(&lat, vec![1, 0, 1, 0]).unwrap();
        let s = EventStream::from_events(&lat, 1.0, 3.0, &[(1.0, 0), (2.0, 1)]).unwrap();
        let env = ExclusionTrajectory { initial: init, stream: s }.freeze();
        // site 0: occupied on [0,1), empty after
        assert_eq!(env.occupied_time(0, 3.0), 1.0);
        // site 1: empty, filled at 1, swapped with site 2 (also full) at 2 -> no flip
        assert_eq!(env.occupied_time(1, 3.0), 2.0);
        assert_eq!(env.value(1, 2.5), 1);
        assert!((env.occupied_between(1, 0.5, 1.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn event_stream_roundtrip() {
        let lat = TorusLattice::dyadic(2, 2).unwrap();
        let s = EventStream::sample(&lat, 16.0, 0.5, 77).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = EventStream::read_from(buf.as_slice()).unwrap();
        assert_eq!(s, back);
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 8 + 8 + 8 + 12 * s.len());
        buf[0] = b'X';
        assert!(EventStream::read_from(buf.as_slice()).is_err());
    }
}
