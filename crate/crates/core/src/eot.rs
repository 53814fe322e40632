//! Discrete entropic transport between sample clouds.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelCache;
use crate::rng::{rng, Rng};

/// Regularisation used when none is given.
pub const DEFAULT_EPSILON: f64 = 1.0;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-8;

const CHECK_EVERY: usize = 10;

/// Transport plan with its dual potentials.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub plan: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// `|pi 1 - a|_1 + |pi^T 1 - b|_1` at exit.
    pub marginal_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// `C_ij = 1/2 (y_j - mu_T^{x_i})^T Sigma_T^{-1} (y_j - mu_T^{x_i})`, the
/// negative log transition density of the reference up to a constant.
pub fn mvou_cost(cache: &KernelCache, x0: &[DVector<f64>], xt: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let d = cache.dim();
    if x0.iter().chain(xt.iter()).any(|x| x.len() != d) {
        return Err(Error::invalid(format!("samples must have dimension {d}")));
    }
    let w = cache.sigma_t_invroot()?;
    let horizon = cache.horizon();
    let src: Vec<DVector<f64>> = x0
        .iter()
        .map(|x| Ok(w * cache.mean_from(x, horizon)?))
        .collect::<Result<_>>()?;
    let dst: Vec<DVector<f64>> = xt.iter().map(|y| w * y).collect();
    let rows: Vec<Vec<f64>> = src
        .par_iter()
        .map(|s| dst.iter().map(|y| 0.5 * (y - s).norm_squared()).collect())
        .collect();
    Ok(DMatrix::from_fn(x0.len(), xt.len(), |i, j| rows[i][j]))
}

fn check_weights(w: &[f64], name: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::invalid(format!("{name} weights must be strictly positive")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} weights sum to {s}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Uniform weights `1/n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Log-domain Sinkhorn. Non-convergence is reported in the result, not raised.
pub fn sinkhorn(cost: &DMatrix<f64>, a: &[f64], b: &[f64], config: SinkhornConfig) -> Result<Coupling> {
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::invalid(format!(
            "weights of length ({}, {}) for a {n}x{m} cost",
            a.len(),
            b.len()
        )));
    }
    check_weights(a, "source")?;
    check_weights(b, "target")?;
    let eps = config.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let cost_t = cost.transpose();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let update_f = |g: &[f64], f: &mut [f64]| {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            // row i of the cost is column i of its transpose
            let row = cost_t.column(i);
            let lse = log_sum_exp(g.iter().zip(row.iter()).map(|(gj, c)| (gj - c) / eps));
            *fi = eps * (log_a[i] - lse);
        });
    };
    let update_g = |f: &[f64], g: &mut [f64]| {
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            let col = cost.column(j);
            let lse = log_sum_exp(f.iter().zip(col.iter()).map(|(fi, c)| (fi - c) / eps));
            *gj = eps * (log_b[j] - lse);
        });
    };
    let marginal_error = |f: &[f64], g: &[f64]| -> f64 {
        let rows: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = cost_t.column(i);
                let s: f64 = g.iter().zip(row.iter()).map(|(gj, c)| ((f[i] + gj - c) / eps).exp()).sum();
                (s - a[i]).abs()
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        let cols: f64 = (0..m)
            .into_par_iter()
            .map(|j| {
                let col = cost.column(j);
                let s: f64 = f.iter().zip(col.iter()).map(|(fi, c)| ((fi + g[j] - c) / eps).exp()).sum();
                (s - b[j]).abs()
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        rows + cols
    };

    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let mut converged = false;
    while iterations < config.max_iters {
        update_f(&g, &mut f);
        update_g(&f, &mut g);
        iterations += 1;
        if iterations % CHECK_EVERY == 0 || iterations == config.max_iters {
            let shift = (g.iter().sum::<f64>() / m as f64 - f.iter().sum::<f64>() / n as f64) * 0.5;
            f.iter_mut().for_each(|x| *x += shift);
            g.iter_mut().for_each(|x| *x -= shift);
            err = marginal_error(&f, &g);
            if !err.is_finite() {
                return Err(Error::NonFinite { step: iterations });
            }
            if err < config.tol {
                converged = true;
                break;
            }
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());
    Ok(Coupling {
        plan,
        f: DVector::from_vec(f),
        g: DVector::from_vec(g),
        epsilon: eps,
        iterations,
        marginal_error: err,
        converged,
    })
}

/// Categorical sampler over plan cells, built once per plan.
#[derive(Debug, Clone)]
pub struct PlanSampler {
    cumulative: Vec<f64>,
    cols: usize,
}

impl PlanSampler {
    pub fn new(plan: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = plan.shape();
        let mut cumulative = Vec::with_capacity(n * m);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = plan[(i, j)];
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::invalid("plan entries must be finite and nonnegative"));
                }
                acc += p;
                cumulative.push(acc);
            }
        }
        if !(acc > 0.0) {
            return Err(Error::invalid("plan has zero mass"));
        }
        Ok(Self { cumulative, cols: m })
    }

    /// One `(row, col)` draw: the first cell whose cumulative mass exceeds `u`.
    pub fn draw(&self, rng: &mut Rng) -> (usize, usize) {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
        (k / self.cols, k % self.cols)
    }
}

pub fn sample_coupling(coupling: &Coupling, batch: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let sampler = PlanSampler::new(&coupling.plan)?;
    let mut r = rng(seed);
    Ok((0..batch).map(|_| sampler.draw(&mut r)).collect())
}
