//! Composite Gauss-Legendre rules.
//!
//! Heat-kernel integrands have a boundary layer at `t = 0` and decay
//! algebraically afterwards, so the renormalization integrals use panels
//! whose length doubles: `[0, 1], [1, 2], [2, 4], ...`. Refinement splits
//! every panel into more equal pieces.

use gauss_quad::GaussLegendre;

/// Nodes and weights of a quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn reference_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    let order = order.max(2);
    let gl = GaussLegendre::new(order.try_into().expect("order >= 2"));
    (gl.nodes().copied().collect(), gl.weights().copied().collect())
}

impl GaussRule {
    fn push_panel(&mut self, a: f64, b: f64, xs: &[f64], ws: &[f64]) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (x, w) in xs.iter().zip(ws) {
            self.nodes.push(mid + half * x);
            self.weights.push(half * w);
        }
    }

    /// `panels` equal panels on `[a, b]`, `order` nodes each.
    pub fn composite_uniform(a: f64, b: f64, panels: usize, order: usize) -> Self {
        let (xs, ws) = reference_rule(order);
        let mut rule = GaussRule { nodes: Vec::new(), weights: Vec::new() };
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            rule.push_panel(a + p as f64 * h, a + (p + 1) as f64 * h, &xs, &ws);
        }
        rule
    }

    /// Dyadic panels `[0,1], [1,2], ..., [2^{k-1}, 2^k]` covering `[0, 2^k]`,
    /// each split into `subdivisions` equal pieces with `order` nodes.
    pub fn dyadic(k: u32, subdivisions: usize, order: usize) -> Self {
        let (xs, ws) = reference_rule(order);
        let mut rule = GaussRule { nodes: Vec::new(), weights: Vec::new() };
        let mut edges = vec![0.0, 1.0];
        for j in 1..=k {
            edges.push((1u64 << j) as f64);
        }
        for win in edges.windows(2) {
            let h = (win[1] - win[0]) / subdivisions as f64;
            for s in 0..subdivisions {
                rule.push_panel(win[0] + s as f64 * h, win[0] + (s + 1) as f64 * h, &xs, &ws);
            }
        }
        rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        let r = GaussRule::composite_uniform(0.0, 2.0, 3, 4);
        assert!((r.integrate(|x| x.powi(7)) - 2f64.powi(8) / 8.0).abs() < 1e-10);
    }

    #[test]
    fn dyadic_covers_interval() {
        let r = GaussRule::dyadic(6, 2, 5);
        assert!((r.integrate(|_| 1.0) - 64.0).abs() < 1e-12);
        assert!((r.integrate(|x| (-x).exp()) - (1.0 - (-64f64).exp())).abs() < 1e-10);
    }
}
