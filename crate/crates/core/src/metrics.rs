//! Distances between distributions and between vector fields.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eot::{sinkhorn, uniform, SinkhornConfig};
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, sqrtm_psd, symmetrize};
use crate::process::Gaussian;
use crate::rng::{rng, standard_normal};

/// Jitter added to empirical covariances before Gaussian comparisons.
pub const FIT_JITTER: f64 = 1e-8;

/// Above this many cost entries the EMD falls back to an entropic plan.
pub const EMD_EXACT_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_x: usize,
    pub n_y: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
}

/// Squared Bures-Wasserstein distance.
pub fn bw2(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::invalid("Gaussians differ in dimension"));
    }
    let r = sqrtm_psd(g1.cov())?;
    let cross = sqrtm_psd(&symmetrize(&(&r * g2.cov() * &r)))?;
    let v = (g1.mean() - g2.mean()).norm_squared() + g1.cov().trace() + g2.cov().trace() - 2.0 * cross.trace();
    Ok(v.max(0.0))
}

/// [`bw2`] between Gaussian fits of two sample sets.
pub fn bw2_samples(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    bw2(&Gaussian::fit(x, FIT_JITTER)?, &Gaussian::fit(y, FIT_JITTER)?)
}

fn check_sets(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("sample sets must be nonempty"));
    }
    let d = x[0].len();
    if x.iter().chain(y.iter()).any(|v| v.len() != d) {
        return Err(Error::invalid("samples differ in dimension"));
    }
    Ok(())
}

/// Mean pairwise distance over all ordered pairs, summed in a fixed order.
fn mean_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
    let rows: Vec<f64> = x
        .par_iter()
        .map(|a| y.iter().map(|b| (a - b).norm()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic).
pub fn energy_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    check_sets(x, y)?;
    Ok(2.0 * mean_distance(x, y) - mean_distance(x, x) - mean_distance(y, y))
}

/// Exact transport cost between uniform clouds by successive shortest paths.
///
/// Source `i` supplies `m` units and sink `j` demands `n` units so all
/// capacities are integers; the cost is divided by `n m` at the end.
fn transport_exact(cost: &DMatrix<f64>) -> f64 {
    let (n, m) = cost.shape();
    let mut supply = vec![m as u64; n];
    let mut demand = vec![n as u64; m];
    let mut flow = DMatrix::<u64>::zeros(n, m);
    // node k < n is source k, node n + j is sink j
    let mut potential = vec![0.0f64; n + m];
    let mut remaining = (n * m) as u64;
    let v = n + m;
    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; v];
        let mut parent = vec![usize::MAX; v];
        let mut done = vec![false; v];
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for k in 0..v {
                if !done[k] && dist[k] < best {
                    best = dist[k];
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let w = n + j;
                    if done[w] {
                        continue;
                    }
                    let rc = (cost[(u, j)] + potential[u] - potential[w]).max(0.0);
                    if best + rc < dist[w] {
                        dist[w] = best + rc;
                        parent[w] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[(i, j)] == 0 {
                        continue;
                    }
                    let rc = (-cost[(i, j)] + potential[u] - potential[i]).max(0.0);
                    if best + rc < dist[i] {
                        dist[i] = best + rc;
                        parent[i] = u;
                    }
                }
            }
        }
        let target = (0..m)
            .filter(|&j| demand[j] > 0 && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]))
            .expect("transport problem is always feasible");
        let cap = dist[n + target];
        for k in 0..v {
            potential[k] += dist[k].min(cap);
        }
        // walk back to find the bottleneck
        let mut amount = demand[target];
        let mut w = n + target;
        while parent[w] != usize::MAX {
            let p = parent[w];
            if p >= n {
                amount = amount.min(flow[(w, p - n)]);
            }
            w = p;
        }
        amount = amount.min(supply[w]);
        let origin = w;
        let mut w = n + target;
        while parent[w] != usize::MAX {
            let p = parent[w];
            if p < n {
                flow[(p, w - n)] += amount;
            } else {
                flow[(w, p - n)] -= amount;
            }
            w = p;
        }
        supply[origin] -= amount;
        demand[target] -= amount;
        remaining -= amount;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += flow[(i, j)] as f64 * cost[(i, j)];
        }
    }
    total / (n * m) as f64
}

/// Earth mover's distance between uniform sample clouds.
///
/// Ground cost is Euclidean, or squared Euclidean with `squared`. Exact up to
/// [`EMD_EXACT_LIMIT`] cost entries, entropic (`epsilon = 1e-3`) beyond; the
/// report says which.
pub fn emd(x: &[DVector<f64>], y: &[DVector<f64>], squared: bool) -> Result<MetricReport> {
    check_sets(x, y)?;
    let cost = DMatrix::from_fn(x.len(), y.len(), |i, j| {
        let d2 = (&x[i] - &y[j]).norm_squared();
        if squared {
            d2
        } else {
            d2.sqrt()
        }
    });
    let exact = x.len() * y.len() <= EMD_EXACT_LIMIT;
    let value = if exact {
        transport_exact(&cost)
    } else {
        let cfg = SinkhornConfig {
            epsilon: 1e-3,
            ..SinkhornConfig::default()
        };
        let c = sinkhorn(&cost, &uniform(x.len()), &uniform(y.len()), cfg)?;
        c.plan.component_mul(&cost).sum()
    };
    Ok(MetricReport {
        name: if squared { "emd_sq".into() } else { "emd".into() },
        value: value.max(0.0),
        n_x: x.len(),
        n_y: y.len(),
        std_error: None,
        exact: Some(exact),
    })
}

/// Root-mean-square difference between two fields under a Gaussian law at
/// each time, averaged over times, with a delta-method standard error.
pub fn force_error<F, G>(
    field1: F,
    field2: G,
    laws: &[Gaussian],
    times: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<MetricReport>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    G: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if laws.len() != times.len() || times.is_empty() {
        return Err(Error::invalid("need one law per time"));
    }
    if n_mc < 2 {
        return Err(Error::invalid("force error needs at least two samples per time"));
    }
    let mut r = rng(seed);
    let mut total = 0.0;
    let mut var = 0.0;
    for (law, &t) in laws.iter().zip(times) {
        let factor = psd_factor(law.cov());
        let errs: Vec<f64> = (0..n_mc)
            .map(|_| {
                let x = law.mean() + &factor * standard_normal(&mut r, law.dim());
                (field1(t, &x) - field2(t, &x)).norm_squared()
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / n_mc as f64;
        let sd2 = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_mc - 1) as f64;
        let rms = mean.sqrt();
        total += rms;
        if rms > 0.0 {
            var += sd2 / n_mc as f64 / (4.0 * mean);
        }
    }
    let k = times.len() as f64;
    Ok(MetricReport {
        name: "force_error".into(),
        value: total / k,
        n_x: n_mc,
        n_y: times.len(),
        std_error: Some(var.sqrt() / k),
        exact: None,
    })
}
