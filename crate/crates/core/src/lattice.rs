//! Discrete tori `(Z / L Z)^d`, their edges, and the space-time norms used by
//! the kernels and cumulant bounds.
//!
//! Sites are stored row-major (the last coordinate varies fastest). Public
//! entry points take coordinates; the linear index is exposed for the hot
//! loops of the simulation code.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// A `d`-dimensional discrete torus of side `L`.
///
/// The canonical tori have `L = 2^N`. Arbitrary sides `L >= 3` are available
/// through [`TorusLattice::with_side`] for oracle computations that do not
/// depend on dyadic structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusLattice {
    dim: usize,
    side: usize,
    level: Option<u32>,
    num_sites: usize,
}

impl TorusLattice {
    /// Torus of side `2^level`.
    pub fn dyadic(dim: usize, level: u32) -> Result<Self> {
        if level >= 31 {
            return domain(format!("level {level} too large"));
        }
        let mut lat = Self::with_side(dim, 1usize << level)?;
        lat.level = Some(level);
        Ok(lat)
    }

    /// Torus of arbitrary side `L >= 3`.
    pub fn with_side(dim: usize, side: usize) -> Result<Self> {
        if dim == 0 {
            return domain("dimension must be positive");
        }
        if side <= 2 {
            return domain(format!(
                "side {side} rejected: tori of side <= 2 carry multi-edges"
            ));
        }
        let num_sites = side
            .checked_pow(dim as u32)
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::Domain(format!("torus {side}^{dim} too large")))?;
        let level = if side.is_power_of_two() {
            Some(side.trailing_zeros())
        } else {
            None
        };
        Ok(Self {
            dim,
            side,
            level,
            num_sites,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Dyadic level `N` with `side = 2^N`, if the side is a power of two.
    pub fn level(&self) -> Option<u32> {
        self.level
    }

    /// Dyadic level, or an error for non-dyadic tori.
    pub fn require_level(&self) -> Result<u32> {
        self.level
            .ok_or_else(|| Error::Domain(format!("side {} is not dyadic", self.side)))
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    /// Number of undirected nearest-neighbour edges, `d * L^d`.
    pub fn num_edges(&self) -> usize {
        self.dim * self.num_sites
    }

    /// Mesh size of the rescaled torus, `1 / L`.
    pub fn spacing(&self) -> f64 {
        1.0 / self.side as f64
    }

    /// Linear index of a site given by coordinates in `[0, L)`.
    pub fn index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dim {
            return domain(format!(
                "expected {} coordinates, got {}",
                self.dim,
                coords.len()
            ));
        }
        let mut idx = 0;
        for &c in coords {
            if c >= self.side {
                return domain(format!("coordinate {c} outside [0, {})", self.side));
            }
            idx = idx * self.side + c;
        }
        Ok(idx)
    }

    /// Linear index of a site given by arbitrary integer coordinates, reduced
    /// modulo the side.
    pub fn index_wrapped(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        let l = self.side as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(l) as usize)
    }

    /// Coordinates of a linear index.
    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        for slot in out.iter_mut().rev() {
            *slot = idx % self.side;
            idx /= self.side;
        }
        out
    }

    /// Coordinate `axis` of site `idx`.
    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.side
    }

    #[inline]
    pub(crate) fn stride(&self, axis: usize) -> usize {
        self.side.pow((self.dim - 1 - axis) as u32)
    }

    /// Neighbour of `idx` one step along `axis` in direction `+1` or `-1`.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, forward: bool) -> usize {
        let s = self.stride(axis);
        let c = (idx / s) % self.side;
        if forward {
            if c + 1 == self.side {
                idx + s - self.side * s
            } else {
                idx + s
            }
        } else if c == 0 {
            idx + (self.side - 1) * s
        } else {
            idx - s
        }
    }

    /// Endpoints of edge `e`. Edge `e = site * d + axis` joins `site` and its
    /// forward neighbour along `axis`, so every undirected edge appears once.
    #[inline]
    pub fn edge(&self, e: usize) -> (usize, usize) {
        let site = e / self.dim;
        let axis = e % self.dim;
        (site, self.shift(site, axis, true))
    }

    /// All edges in index order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_edges()).map(|e| self.edge(e))
    }

    /// The `2d` nearest neighbours of a site.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim).flat_map(move |a| [self.shift(idx, a, true), self.shift(idx, a, false)])
    }

    /// Site `x + y` (group operation of the torus).
    pub fn add(&self, x: usize, y: usize) -> usize {
        let mut out = 0;
        for a in 0..self.dim {
            out = out * self.side + (self.coord(x, a) + self.coord(y, a)) % self.side;
        }
        out
    }

    /// Site `x - y`.
    pub fn sub(&self, x: usize, y: usize) -> usize {
        let mut out = 0;
        for a in 0..self.dim {
            out = out * self.side + (self.coord(x, a) + self.side - self.coord(y, a)) % self.side;
        }
        out
    }

    /// Minimal-image displacement `x - y` per coordinate, in `[-L/2, L/2)`.
    pub fn displacement(&self, x: usize, y: usize) -> Vec<i64> {
        let l = self.side as i64;
        (0..self.dim)
            .map(|a| {
                let mut v = (self.coord(x, a) as i64 - self.coord(y, a) as i64).rem_euclid(l);
                if 2 * v >= l {
                    v -= l;
                }
                v
            })
            .collect()
    }

    /// `l^1` torus distance between linear indices.
    pub fn distance_idx(&self, x: usize, y: usize) -> u64 {
        self.displacement(x, y).iter().map(|v| v.unsigned_abs()).sum()
    }

    /// Euclidean torus distance between linear indices, in lattice units.
    pub fn euclidean_distance_idx(&self, x: usize, y: usize) -> f64 {
        self.displacement(x, y)
            .iter()
            .map(|&v| (v * v) as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// `l^1` distance on the torus: the minimum over periodic images of
    /// `|x - y - z|_1`.
    pub fn torus_distance(&self, x: &[usize], y: &[usize]) -> Result<u64> {
        let xi = self.index(x)?;
        let yi = self.index(y)?;
        Ok(self.distance_idx(xi, yi))
    }
}

/// Parabolic scaling exponents `s = (2, 1, ..., 1)` for `d` spatial dimensions.
pub fn parabolic_scaling(dim: usize) -> Vec<u32> {
    let mut s = vec![1; dim + 1];
    s[0] = 2;
    s
}

/// `max_i |z_i|^{1/s_i}`.
pub fn parabolic_norm(z: &[f64], scaling: &[u32]) -> Result<f64> {
    if z.len() != scaling.len() {
        return domain("point and scaling have different lengths");
    }
    if scaling.contains(&0) {
        return domain("scaling exponents must be positive");
    }
    Ok(z
        .iter()
        .zip(scaling)
        .map(|(&c, &s)| match s {
            1 => c.abs(),
            2 => c.abs().sqrt(),
            _ => c.abs().powf(1.0 / s as f64),
        })
        .fold(0.0, f64::max))
}

/// A space-time point `(t, x)`.
///
/// `rescaled` marks points living on `2^{-N} Z^d` (macroscopic units) as
/// opposed to integer lattice coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub rescaled: bool,
}

impl SpaceTimePoint {
    pub fn new(t: f64, x: Vec<f64>, rescaled: bool) -> Self {
        Self { t, x, rescaled }
    }

    /// Parabolic norm of `self - other` with `s = (2, 1, ..., 1)`. Spatial
    /// differences are reduced to the minimal periodic image when `period`
    /// is given.
    pub fn parabolic_distance(&self, other: &SpaceTimePoint, period: Option<f64>) -> f64 {
        let mut m = (self.t - other.t).abs().sqrt();
        for (a, b) in self.x.iter().zip(&other.x) {
            let mut v = (a - b).abs();
            if let Some(p) = period {
                v %= p;
                v = v.min(p - v);
            }
            m = m.max(v);
        }
        m
    }
}

/// `y -> delta^{-|s|} phi(delta^{-2}(y_0 - z_0), delta^{-1}(y_i - z_i))`.
///
/// `phi` takes `(t, x_1, ..., x_d)` as one slice.
pub fn scaled_test_function<F>(
    phi: F,
    delta: f64,
    z0: Vec<f64>,
) -> Result<impl Fn(&[f64]) -> f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(delta > 0.0) {
        return domain(format!("scale delta must be positive, got {delta}"));
    }
    let homogeneity = (z0.len() + 1) as i32;
    let prefactor = delta.powi(-homogeneity);
    Ok(move |y: &[f64]| {
        let mut buf = Vec::with_capacity(y.len());
        buf.push((y[0] - z0[0]) / (delta * delta));
        for i in 1..y.len() {
            buf.push((y[i] - z0[i]) / delta);
        }
        prefactor * phi(&buf)
    })
}

/// Semi-discrete integral `int dt 2^{-Nd} sum_x f(t, x)` over the rescaled
/// torus, with spatial points taken as `center + k / L` for the minimal-image
/// offsets `k`. The time integral uses Gauss-Legendre with `time_panels`
/// equal panels of eight nodes on `[t_min, t_max]`.
pub fn semi_discrete_integral<F>(
    lattice: &TorusLattice,
    f: F,
    center: &[f64],
    t_min: f64,
    t_max: f64,
    time_panels: usize,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let rule = crate::quadrature::GaussRule::composite_uniform(t_min, t_max, time_panels.max(1), 8);
    let h = lattice.spacing();
    let weight = h.powi(lattice.dim() as i32);
    let half = (lattice.side() / 2) as i64;
    let mut point = vec![0.0; lattice.dim() + 1];
    let mut total = 0.0;
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        point[0] = t;
        let mut slice = 0.0;
        for idx in 0..lattice.num_sites() {
            for a in 0..lattice.dim() {
                let k = lattice.coord(idx, a) as i64;
                let k = if k >= lattice.side() as i64 - half { k - lattice.side() as i64 } else { k };
                point[a + 1] = center[a] + k as f64 * h;
            }
            slice += f(&point);
        }
        total += w * slice * weight;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wraparound_distance() {
        let lat = TorusLattice::dyadic(1, 2).unwrap();
        assert_eq!(lat.torus_distance(&[0], &[3]).unwrap(), 1);
        assert_eq!(lat.torus_distance(&[2], &[2]).unwrap(), 0);
    }

    #[test]
    fn distance_two_dimensions() {
        // images of (2,3) relative to the origin: |2| + min(3, 1) = 3
        let lat = TorusLattice::dyadic(2, 2).unwrap();
        assert_eq!(lat.torus_distance(&[0, 0], &[2, 3]).unwrap(), 3);
    }

    #[test]
    fn rejects_small_sides_and_bad_coords() {
        assert!(TorusLattice::with_side(1, 2).is_err());
        assert!(TorusLattice::dyadic(2, 1).is_err());
        let lat = TorusLattice::dyadic(1, 2).unwrap();
        assert!(lat.torus_distance(&[4], &[0]).is_err());
        assert!(lat.index(&[0, 0]).is_err());
    }

    #[test]
    fn edge_count_and_degree() {
        for (d, n) in [(1, 2), (2, 3), (3, 2)] {
            let lat = TorusLattice::dyadic(d, n).unwrap();
            assert_eq!(lat.edges().count(), d * lat.num_sites());
            let mut degree = vec![0; lat.num_sites()];
            let mut seen = std::collections::HashSet::new();
            for (a, b) in lat.edges() {
                degree[a] += 1;
                degree[b] += 1;
                assert!(seen.insert((a.min(b), a.max(b))), "duplicate edge");
            }
            assert!(degree.iter().all(|&k| k == 2 * d));
        }
    }

    #[test]
    fn parabolic_norm_examples() {
        let s = parabolic_scaling(1);
        assert_eq!(parabolic_norm(&[0.0, 0.0], &s).unwrap(), 0.0);
        let s3 = parabolic_scaling(3);
        assert_eq!(parabolic_norm(&[4.0, 1.0, 0.0, 0.0], &s3).unwrap(), 2.0);
        assert_eq!(parabolic_norm(&[0.25, 0.7, 0.0, 0.0], &s3).unwrap(), 0.7);
    }

    #[test]
    fn scaled_identity_at_unit_scale() {
        let phi = |y: &[f64]| (1.0 - y[0] * y[0]).max(0.0) * (1.0 - y[1].abs()).max(0.0);
        let g = scaled_test_function(phi, 1.0, vec![0.0, 0.0]).unwrap();
        for y in [[0.1, 0.2], [-0.5, 0.9], [0.0, 0.0]] {
            assert_eq!(g(&y), phi(&y));
        }
        assert!(scaled_test_function(phi, 0.0, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn scaled_support_shrinks() {
        let phi = |y: &[f64]| if y[0].abs() <= 1.0 && y[1].abs() <= 1.0 { 1.0 } else { 0.0 };
        let delta = 0.25;
        let g = scaled_test_function(phi, delta, vec![0.5, 0.5]).unwrap();
        // outside the parabolic ball of radius delta around z0
        assert_eq!(g(&[0.5 + 1.1 * delta * delta, 0.5]), 0.0);
        assert_eq!(g(&[0.5, 0.5 + 1.1 * delta]), 0.0);
        assert!(g(&[0.5 + 0.9 * delta * delta, 0.5 + 0.9 * delta]) > 0.0);
    }
}
