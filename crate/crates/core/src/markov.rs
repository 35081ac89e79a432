//! Finite-state continuous-time Markov generators and their semigroups.
//!
//! All generators produced by this crate are symmetric matrices (the exclusion
//! dynamics is reversible with respect to a uniform reference measure on each
//! conserved sector), which lets the dense route use a symmetric eigen
//! decomposition and the sparse route propagate row and column vectors alike.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Sparse generator stored by rows: off-diagonal rates plus total exit rate.
#[derive(Debug, Clone)]
pub struct SparseGenerator {
    rows: Vec<Vec<(u32, f64)>>,
    exit: Vec<f64>,
}

impl SparseGenerator {
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let exit = rows.iter().map(|r| r.iter().map(|&(_, q)| q).sum()).collect();
        Self { rows, exit }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(u32, f64)>] {
        &self.rows
    }

    pub fn exit_rate(&self, i: usize) -> f64 {
        self.exit[i]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().copied().fold(0.0, f64::max)
    }

    /// Dense copy, diagonal included.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, q) in row {
                m[(i, j as usize)] += q;
            }
            m[(i, i)] -= self.exit[i];
        }
        m
    }

    /// `out = v Q` (row vector times generator).
    pub fn apply_left(&self, v: &[f64], out: &mut [f64]) {
        for (o, (&vi, &e)) in out.iter_mut().zip(v.iter().zip(&self.exit)) {
            *o = -vi * e;
        }
        for (i, row) in self.rows.iter().enumerate() {
            let vi = v[i];
            if vi != 0.0 {
                for &(j, q) in row {
                    out[j as usize] += vi * q;
                }
            }
        }
    }

    /// `v P_t` by uniformization. Long times are split into chunks so the
    /// Poisson weights never underflow.
    pub fn propagate_left(&self, v: &[f64], t: f64) -> Vec<f64> {
        let lambda = self.max_exit_rate();
        let mut cur = v.to_vec();
        if t <= 0.0 || lambda == 0.0 {
            return cur;
        }
        let chunks = ((lambda * t) / 30.0).ceil().max(1.0) as usize;
        let dt = t / chunks as f64;
        let mut term = vec![0.0; cur.len()];
        let mut qv = vec![0.0; cur.len()];
        for _ in 0..chunks {
            let mean = lambda * dt;
            let mut weight = (-mean).exp();
            let mut acc: Vec<f64> = cur.iter().map(|x| x * weight).collect();
            term.copy_from_slice(&cur);
            let mut mass = weight;
            let mut k = 0usize;
            while 1.0 - mass > 1e-17 && k < 10_000 {
                k += 1;
                // term <- term (I + Q / lambda)
                self.apply_left(&term, &mut qv);
                for (t_i, q_i) in term.iter_mut().zip(&qv) {
                    *t_i += q_i / lambda;
                }
                weight *= mean / k as f64;
                mass += weight;
                for (a, t_i) in acc.iter_mut().zip(&term) {
                    *a += weight * t_i;
                }
            }
            cur = acc;
        }
        cur
    }
}

/// `exp(tQ)` for a symmetric generator `Q`, via a cached eigen decomposition.
#[derive(Debug, Clone)]
pub struct SymmetricSemigroup {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SymmetricSemigroup {
    pub fn new(generator: DMatrix<f64>) -> Result<Self> {
        let asym = (&generator - generator.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::Numerical(format!(
                "generator is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let eig = SymmetricEigen::new(generator);
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Dense transition matrix at time `t`.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for (j, &lam) in self.eigenvalues.iter().enumerate() {
            let f = (lam * t).exp();
            scaled.column_mut(j).scale_mut(f);
        }
        scaled * v.transpose()
    }

    /// `w P_t` for a single vector, without forming the matrix.
    pub fn propagate(&self, w: &[f64], t: f64) -> Vec<f64> {
        let v = &self.eigenvectors;
        let w = DVector::from_column_slice(w);
        let mut coeffs = v.transpose() * w;
        for (c, &lam) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            *c *= (lam * t).exp();
        }
        (v * coeffs).as_slice().to_vec()
    }
}

/// Matrix exponential by scaling and squaring with Padé approximation.
pub fn expm(generator: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    (generator * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize) -> SparseGenerator {
        let rows = (0..n)
            .map(|i| vec![(((i + 1) % n) as u32, 1.0), (((i + n - 1) % n) as u32, 1.0)])
            .collect();
        SparseGenerator::from_rows(rows)
    }

    #[test]
    fn routes_agree() {
        let g = ring(6);
        let dense = g.to_dense();
        let semi = SymmetricSemigroup::new(dense.clone()).unwrap();
        let t = 1.7;
        let a = semi.at(t);
        let b = expm(&dense, t);
        assert!((&a - &b).amax() < 1e-12);
        let mut e0 = vec![0.0; 6];
        e0[0] = 1.0;
        let c = g.propagate_left(&e0, t);
        for j in 0..6 {
            assert!((c[j] - a[(0, j)]).abs() < 1e-13);
        }
    }

    #[test]
    fn long_times_do_not_underflow() {
        let g = ring(5);
        let mut e0 = vec![0.0; 5];
        e0[2] = 1.0;
        let c = g.propagate_left(&e0, 400.0);
        for x in c {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }
}
