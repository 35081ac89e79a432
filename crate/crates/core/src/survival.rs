//! Random walks killed at rate `eps * eta_t(X_t)` inside a frozen exclusion
//! environment.
//!
//! Conditional on the environment and the path, the survival probability is
//! `exp(-eps int_0^t eta(s, X_s) ds)`; the estimators average that weight
//! instead of sampling killing times.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exclusion::{EventStream, ExclusionTrajectory, FrozenEnvironment, OccupancyState};
use crate::lattice::TorusLattice;
use crate::pam::{batch_means, solve, EnvironmentPotential, PamProblem, MIN_REPLICAS};
use crate::rng::{streams, substream, task_rng};

/// Piecewise-constant walk path: `sites[i]` is occupied on
/// `[times[i], times[i + 1])`, the last site until the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkPath {
    pub times: Vec<f64>,
    pub sites: Vec<usize>,
    pub horizon: f64,
}

/// Walk from `x0` jumping to each neighbour at rate `edge_rate` on `[0, horizon]`.
pub fn sample_walk_path<R: Rng>(lattice: &TorusLattice, edge_rate: f64, horizon: f64, x0: usize, rng: &mut R) -> WalkPath {
    let d = lattice.dim();
    let mut times = vec![0.0];
    let mut sites = vec![x0];
    if edge_rate > 0.0 {
        let exp = Exp::new(2.0 * d as f64 * edge_rate).expect("positive rate");
        let mut t = exp.sample(rng);
        let mut x = x0;
        while t < horizon {
            let k = rng.random_range(0..2 * d);
            x = lattice.shift(x, k / 2, k % 2 == 0);
            times.push(t);
            sites.push(x);
            t += exp.sample(rng);
        }
    }
    WalkPath { times, sites, horizon }
}

impl WalkPath {
    /// `int_0^t eta(s, X_s) ds` from the environment's prefix integrals.
    pub fn occupation(&self, env: &FrozenEnvironment, t: f64) -> f64 {
        let mut acc = 0.0;
        for (i, (&a, &x)) in self.times.iter().zip(&self.sites).enumerate() {
            if a >= t {
                break;
            }
            let b = self.times.get(i + 1).copied().unwrap_or(self.horizon).min(t);
            acc += env.occupied_between(x, a, b);
        }
        acc
    }

    /// The same integral by walking through every environment change time
    /// in order and summing `eta * dt` over the resulting pieces.
    pub fn occupation_explicit(&self, env: &FrozenEnvironment, t: f64) -> f64 {
        let mut cuts = env.change_times(0.0, t);
        cuts.extend(self.times.iter().copied().filter(|&s| s > 0.0 && s < t));
        cuts.push(0.0);
        cuts.push(t);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let k = self.times.partition_point(|&s| s <= mid) - 1;
            acc += env.value(self.sites[k], mid) as f64 * (w[1] - w[0]);
        }
        acc
    }
}

/// Survival estimate at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub eps: f64,
    pub beta: f64,
    pub horizon: f64,
    pub points: Vec<SurvivalPoint>,
    /// Surviving mass per site at the horizon, divided by the replica count.
    pub endpoint_histogram: Vec<f64>,
    pub environment_seed: Option<u64>,
    pub replicas: usize,
}

const WALK_CHUNK: usize = 1024;

/// Quenched survival of walks from `x0` jumping at unit rate per edge,
/// killed at rate `eps * eta`, at each probe time (the largest is the
/// horizon).
pub fn simulate_killed_walk(
    env: &FrozenEnvironment,
    eps: f64,
    probes: &[f64],
    x0: usize,
    replicas: usize,
    seed: u64,
) -> Result<SurvivalReport> {
    if eps < 0.0 {
        return domain(format!("killing strength {eps} is negative"));
    }
    if replicas < MIN_REPLICAS {
        return domain(format!("{replicas} replicas is below the minimum of {MIN_REPLICAS}"));
    }
    let lattice = env.lattice();
    if x0 >= lattice.num_sites() {
        return domain(format!("start site {x0} outside the lattice"));
    }
    let mut probes = probes.to_vec();
    probes.sort_by(f64::total_cmp);
    let Some(&horizon) = probes.last() else {
        return domain("no probe times");
    };
    if probes[0] < 0.0 || horizon > env.horizon() {
        return domain(format!("probe times must lie in [0, {}]", env.horizon()));
    }
    let chunks = replicas.div_ceil(WALK_CHUNK);
    let per_chunk: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = task_rng(seed, substream(streams::WALKS, c as u64));
            let todo = WALK_CHUNK.min(replicas - c * WALK_CHUNK);
            let mut weights = vec![Vec::with_capacity(todo); probes.len()];
            let mut hist = vec![0.0; lattice.num_sites()];
            for _ in 0..todo {
                let path = sample_walk_path(lattice, 1.0, horizon, x0, &mut rng);
                for (slot, &t) in weights.iter_mut().zip(&probes) {
                    slot.push((-eps * path.occupation(env, t)).exp());
                }
                hist[*path.sites.last().unwrap()] += weights.last().unwrap().last().unwrap();
            }
            (weights, hist)
        })
        .collect();
    let mut hist = vec![0.0; lattice.num_sites()];
    let mut all = vec![Vec::with_capacity(replicas); probes.len()];
    for (w, h) in per_chunk {
        for (slot, v) in all.iter_mut().zip(w) {
            slot.extend(v);
        }
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    for h in hist.iter_mut() {
        *h /= replicas as f64;
    }
    let points = probes
        .iter()
        .zip(&all)
        .map(|(&t, w)| {
            let m = batch_means(w);
            SurvivalPoint { t, estimate: m.estimate, std_error: m.std_error }
        })
        .collect();
    Ok(SurvivalReport {
        eps,
        beta: f64::NAN,
        horizon,
        points,
        endpoint_histogram: hist,
        environment_seed: None,
        replicas,
    })
}

/// Survival from the dual PAM: the killed sub-probability density solves
/// `dp/dt = Delta p - eps eta p` with `p(0) = delta_{x0}`; its total mass is
/// the survival probability.
pub fn survival_by_duality(env: &FrozenEnvironment, eps: f64, t: f64, x0: usize, dt: f64) -> Result<f64> {
    let lattice = env.lattice();
    let mut u0 = vec![0.0; lattice.num_sites()];
    u0[x0] = 1.0;
    let pot = EnvironmentPotential::killing(env, eps);
    let f = solve(PamProblem { diffusion: 1.0, potential: &pot }, &u0, t, dt, &[])?;
    Ok(f.last().iter().sum())
}

/// Killing exponent for dimension `d`: `2 / (4 - d)`.
pub fn default_beta(dim: usize) -> f64 {
    2.0 / (4.0 - dim as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub dim: usize,
    pub level: u32,
    pub eps: Vec<f64>,
    pub tau: f64,
    pub rho: f64,
    pub beta: f64,
    /// Upper bound on the microscopic horizon `tau eps^{-2 beta}`.
    pub max_horizon: f64,
    pub seeds: Vec<u64>,
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub horizon: f64,
    /// `horizon * eps^{2 beta}`, equal to `tau` unless capped.
    pub effective_tau: f64,
    pub survival: f64,
    pub std_error: f64,
    pub log_survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Coefficients of `eps^{-3} tau, eps^{-2} tau, eps^{-1} tau, log eps`.
    pub coefficients: [f64; 4],
    pub residuals: Vec<f64>,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub fit: ScalingFit,
    pub note: String,
}

/// Fewest distinct killing strengths accepted by the regression.
pub const MIN_SCALING_POINTS: usize = 5;

/// Least-squares fit of `log S` on `{eps^{-3} tau, eps^{-2} tau, eps^{-1} tau, log eps}`.
pub fn fit_log_survival(rows: &[ScalingRow]) -> Result<ScalingFit> {
    let mut distinct: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < MIN_SCALING_POINTS {
        return domain(format!(
            "{} distinct eps values cannot identify four coefficients; need at least {MIN_SCALING_POINTS}",
            distinct.len()
        ));
    }
    if rows.iter().any(|r| !r.log_survival.is_finite()) {
        return Err(Error::Numerical("a survival estimate underflowed to zero".into()));
    }
    let design = DMatrix::from_fn(rows.len(), 4, |i, j| {
        let (e, t) = (rows[i].eps, rows[i].effective_tau);
        match j {
            0 => t / (e * e * e),
            1 => t / (e * e),
            2 => t / e,
            _ => e.ln(),
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.log_survival));
    let svd = design.clone().svd(true, true);
    let beta = svd.solve(&y, 1e-12).map_err(|e| Error::Numerical(e.to_string()))?;
    let resid = &y - &design * &beta;
    let residuals: Vec<f64> = resid.iter().copied().collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(ScalingFit { coefficients: [beta[0], beta[1], beta[2], beta[3]], residuals, rms_residual: rms })
}

/// Environment for `seed` at density `rho`. The initial occupation
/// thresholds a shared uniform field, so environments with the same seed
/// and different densities are ordered site by site for all times.
pub fn coupled_environment(lattice: &TorusLattice, rho: f64, horizon: f64, seed: u64) -> Result<FrozenEnvironment> {
    let mut rng = task_rng(seed, streams::INITIAL);
    let uniforms: Vec<f64> = (0..lattice.num_sites()).map(|_| rng.random::<f64>()).collect();
    let initial = OccupancyState::from_uniforms(lattice, rho, &uniforms);
    let stream = EventStream::sample(lattice, 1.0, horizon, substream(seed, streams::EVENTS))?;
    Ok(ExclusionTrajectory { initial, stream }.freeze())
}

/// Annealed survival over seeds at each `eps` with horizons
/// `min(tau eps^{-2 beta}, max_horizon)`, and the log-survival regression.
/// Exploratory: the fitted constants are not asserted.
pub fn survival_scaling_experiment(cfg: &ScalingConfig) -> Result<ScalingTable> {
    let mut errors = Vec::new();
    if cfg.seeds.is_empty() {
        errors.push("need at least one seed".to_string());
    }
    if cfg.eps.iter().any(|&e| !(e > 0.0)) {
        errors.push("every eps must be positive".to_string());
    }
    if !(cfg.tau > 0.0) {
        errors.push("tau must be positive".to_string());
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut distinct = cfg.eps.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < MIN_SCALING_POINTS {
        return domain(format!(
            "{} distinct eps values cannot identify four coefficients; need at least {MIN_SCALING_POINTS}",
            distinct.len()
        ));
    }
    let lattice = TorusLattice::dyadic(cfg.dim, cfg.level)?;
    let horizons: Vec<f64> = distinct.iter().map(|&e| (cfg.tau * e.powf(-2.0 * cfg.beta)).min(cfg.max_horizon)).collect();
    let longest = horizons.iter().copied().fold(0.0, f64::max);
    let mut per_eps: Vec<Vec<f64>> = vec![Vec::new(); distinct.len()];
    for &seed in &cfg.seeds {
        let env = coupled_environment(&lattice, cfg.rho, longest, seed)?;
        for (k, (&e, &h)) in distinct.iter().zip(&horizons).enumerate() {
            let r = simulate_killed_walk(&env, e, &[h], 0, cfg.replicas, substream(seed, k as u64))?;
            per_eps[k].push(r.points[0].estimate);
        }
    }
    let rows: Vec<ScalingRow> = distinct
        .iter()
        .zip(&horizons)
        .zip(&per_eps)
        .map(|((&eps, &horizon), s)| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            ScalingRow {
                eps,
                horizon,
                effective_tau: horizon * eps.powf(2.0 * cfg.beta),
                survival: mean,
                std_error: (var / n).sqrt(),
                log_survival: mean.ln(),
            }
        })
        .collect();
    let fit = fit_log_survival(&rows)?;
    Ok(ScalingTable {
        rows,
        fit,
        note: "exploratory fit; asymptotic constants are not desk-verifiable".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_fit_rejected() {
        let row = ScalingRow { eps: 0.5, horizon: 1.0, effective_tau: 1.0, survival: 0.5, std_error: 0.0, log_survival: 0.5f64.ln() };
        assert!(fit_log_survival(std::slice::from_ref(&row)).is_err());
        assert!(fit_log_survival(&vec![row; 8]).is_err());
    }
}
